import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sketchnmf.bench_io import gen_synthetic
from sketchnmf.cluster import (
    AsyncChannel,
    DSANLSNode,
    Envelope,
    SyncCluster,
    Tag,
    all_reduce_sum,
    build_states,
    dsanls_run,
)
from sketchnmf.exceptions import (
    BarrierTimeoutError,
    InvalidConfigError,
    ProtocolClosedError,
    ProtocolViolationError,
    ShapeError,
)
from sketchnmf.matcore import Partition, make_partition
from sketchnmf.sanls import RunConfig, sanls_run
from sketchnmf.sketch import SketchMatrix, gen_gaussian_sketch


@pytest.fixture(scope="module")
def M():
    return gen_synthetic(80, 64, 5, 0.01, seed=5)[0]


# -- all-reduce ------------------------------------------------------------

def test_all_reduce_single_contribution_unchanged(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(all_reduce_sum([x]), x)


def test_all_reduce_identity_multiples():
    I = np.eye(3)
    np.testing.assert_array_equal(all_reduce_sum([I, 2 * I, 3 * I]), 6 * I)


def test_all_reduce_is_left_to_right(rng):
    xs = [rng.standard_normal((4, 6)) * 10.0 ** rng.integers(-8, 8) for _ in range(5)]
    ref = xs[0].copy()
    for x in xs[1:]:
        ref = ref + x
    np.testing.assert_array_equal(all_reduce_sum(xs), ref)
    np.testing.assert_array_equal(SyncCluster(5).all_reduce_sum(xs), ref)


def test_all_reduce_errors():
    with pytest.raises(BarrierTimeoutError):
        all_reduce_sum([np.ones((2, 2)), None])
    with pytest.raises(BarrierTimeoutError):
        SyncCluster(3).all_reduce_sum([np.ones((2, 2))] * 2)
    with pytest.raises(ShapeError):
        all_reduce_sum([np.ones((2, 2)), np.ones((2, 3))])
    with pytest.raises(InvalidConfigError):
        SyncCluster(0)


def test_cluster_accounts_bytes_and_logs():
    c = SyncCluster(2)
    c.all_reduce_mean([np.ones((3, 4)), 3 * np.ones((3, 4))], label="U")
    assert list(c.bytes_by_label["U"]) == [96, 96]
    assert [e.sender for e in c.log] == [0, 1]
    assert all(e.tag == Tag.ALL_REDUCE for e in c.log)


# -- envelopes -------------------------------------------------------------

@given(arrays(np.float64, st.tuples(st.integers(0, 6), st.integers(0, 6))),
       st.sampled_from(list(Tag)), st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1))
def test_envelope_roundtrip(payload, tag, sender, ts):
    env = Envelope(sender, payload, tag, ts)
    back = Envelope.decode(env.encode())
    assert (back.sender, back.tag, back.timestamp) == (sender, tag, ts)
    np.testing.assert_array_equal(back.payload, payload)


def test_envelope_layout():
    buf = Envelope(7, np.array([[1.5, -2.0]]), Tag.CLIENT_PUSH, 9).encode()
    assert struct.unpack("<IIQII", buf[:24]) == (1, 7, 9, 1, 2)
    assert struct.unpack("<2d", buf[24:]) == (1.5, -2.0)
    assert len(buf) == 24 + 16


def test_envelope_rejects_sketches_and_bad_bytes():
    S = gen_gaussian_sketch(0, 0, 4, 2)
    with pytest.raises(ProtocolViolationError):
        Envelope(0, S, Tag.ALL_REDUCE)
    with pytest.raises(ProtocolViolationError):
        Envelope(0, np.ones(3), Tag.ALL_REDUCE)
    with pytest.raises(ProtocolViolationError):
        Envelope(0, np.ones((2, 2), dtype=np.float32), Tag.ALL_REDUCE)
    buf = Envelope(0, np.ones((2, 2)), Tag.ALL_REDUCE).encode()
    with pytest.raises(ProtocolViolationError):
        Envelope.decode(buf[:-8])
    with pytest.raises(ProtocolViolationError):
        Envelope.decode(buf[:10])
    with pytest.raises(ProtocolViolationError):
        Envelope.decode(struct.pack("<IIQII", 9, 0, 0, 0, 0))


# -- async channel ---------------------------------------------------------

def _push(ch, r, i, t=0.0):
    ch.client_push(Envelope(r, np.full((1, 1), float(i)), Tag.CLIENT_PUSH, i), ready_time=t)


def _drain(ch):
    out = []
    while (item := ch.server_recv()) is not None:
        out.append((item[1].sender, int(item[1].timestamp)))
    return out


def test_single_client_fifo():
    ch = AsyncChannel(1)
    for i in range(10):
        _push(ch, 0, i)
    assert [ts for _, ts in _drain(ch)] == list(range(10))


def _interleaving(seed, per_client=30):
    ch = AsyncChannel(2, scheduler_seed=seed)
    for i in range(per_client):
        _push(ch, 0, i)
        _push(ch, 1, i)
    out = _drain(ch)
    assert ch.pushed == ch.delivered == 2 * per_client
    return out


def test_interleaving_depends_on_seed_and_is_lossless():
    a, b = _interleaving(1), _interleaving(2)
    assert a != b
    for order in (a, b):
        for r in (0, 1):
            assert [ts for s, ts in order if s == r] == list(range(30))  # FIFO, no loss


def test_interleaving_replays():
    assert _interleaving(42) == _interleaving(42)


@given(st.integers(0, 1000), st.integers(2, 5))
def test_fairness_bound(seed, n):
    ch = AsyncChannel(n, scheduler_seed=seed)
    for i in range(40):
        for r in range(n):
            _push(ch, r, i)
    order = [s for s, _ in _drain(ch)]
    for r in range(n):
        gaps = np.diff([-1] + [i for i, s in enumerate(order) if s == r])
        assert gaps.max() - 1 <= n + n - 1  # at most `fairness` skips between turns


def test_earlier_arrival_wins():
    ch = AsyncChannel(2)
    _push(ch, 0, 0, t=5.0)
    _push(ch, 1, 0, t=1.0)
    assert ch.server_recv()[1].sender == 1


def test_channel_shutdown_and_contracts():
    ch = AsyncChannel(2, payload_shape=(1, 1))
    with pytest.raises(ProtocolViolationError):
        ch.client_push(Envelope(0, np.ones((2, 1)), Tag.CLIENT_PUSH))
    with pytest.raises(ProtocolViolationError):
        ch.client_push(Envelope(0, np.ones((1, 1)), Tag.SERVER_REPLY))
    with pytest.raises(ProtocolViolationError):
        ch.client_push(Envelope(5, np.ones((1, 1)), Tag.CLIENT_PUSH))
    ch.server_reply(1, Envelope(0xFFFFFFFF, np.ones((1, 1)), Tag.SERVER_REPLY))
    assert ch.client_recv(1) is not None and ch.client_recv(1) is None
    ch.close()
    with pytest.raises(ProtocolClosedError):
        _push(ch, 0, 1)
    assert ch.server_recv(block=True) is None
    assert ch.client_recv(0, block=True) is None


# -- DSANLS ----------------------------------------------------------------

def test_single_node_matches_sanls_bit_exactly(M):
    for kind in ("subsampling", "gaussian"):
        cfg = RunConfig(k=5, T=25, sketch=kind, seed=8)
        U, V, tr = sanls_run(M, cfg)
        Ud, Vd, trd, _ = dsanls_run(M, cfg, 1)
        np.testing.assert_array_equal(Ud, U)
        np.testing.assert_array_equal(Vd, V)
        assert trd.rel_err == tr.rel_err


@pytest.mark.parametrize("N", [2, 3, 4, 7])
def test_cross_node_count_bit_exact_subsampling(M, N):
    cfg = RunConfig(k=5, T=25, seed=8, method="sanls-pcd")
    U1, V1, _, _ = dsanls_run(M, cfg, 1, monitor=False)
    UN, VN, _, _ = dsanls_run(M, cfg, N, monitor=False)
    np.testing.assert_array_equal(UN, U1)
    np.testing.assert_array_equal(VN, V1)


def test_cross_node_count_gaussian_close(M):
    cfg = RunConfig(k=5, T=25, seed=8, sketch="gaussian")
    U1, V1, _, _ = dsanls_run(M, cfg, 1, monitor=False)
    U4, V4, _, _ = dsanls_run(M, cfg, 4, monitor=False)
    np.testing.assert_allclose(U4, U1, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(V4, V1, rtol=1e-9, atol=1e-12)


def test_threaded_workers_identical(M):
    cfg = RunConfig(k=5, T=10, seed=1, method="sanls-pgd", eta0=1e-3)
    a = dsanls_run(M, cfg, 4, monitor=False)
    b = dsanls_run(M, cfg, 4, workers=4, monitor=False)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_every_node_regenerates_the_same_sketch(M):
    cfg = RunConfig(k=5, T=1, sketch="gaussian", seed=4)
    states = build_states(M, cfg, make_partition(80, 64, 4))
    nodes = [DSANLSNode(s, cfg, 80, 64) for s in states]
    for t in (0, 5, 1000):
        ref = nodes[0].sketch_u(t)
        assert all(nd.sketch_u(t).identical_to(ref) for nd in nodes)
        assert all(nd.sketch_v(t).identical_to(nodes[0].sketch_v(t)) for nd in nodes)


def test_communication_is_k_d_per_node(M):
    cfg = RunConfig(k=5, T=3, d=7, d_prime=9, seed=0)
    _, _, tr, cl = dsanls_run(M, cfg, 4, record_payloads=True)
    assert list(cl.bytes_by_label["U"]) == [3 * 5 * 7 * 8] * 4
    assert list(cl.bytes_by_label["V"]) == [3 * 5 * 9 * 8] * 4
    assert tr.bytes_comm[-1] == 3 * 5 * (7 + 9) * 8
    assert cl.log and all(isinstance(e.payload, np.ndarray) and not isinstance(e.payload, SketchMatrix)
                          for e in cl.log)
    assert {e.shape for e in cl.log} == {(5, 7), (5, 9)}


def test_unsketched_all_gather_bytes(M):
    _, _, _, cl = dsanls_run(M, RunConfig(k=5, T=2, method="hals"), 4)
    assert list(cl.bytes_by_label["U"]) == [2 * 5 * 64 * 8] * 4


def test_distributed_hals_equals_centralised(M):
    from sketchnmf.sanls import nmf_run

    cfg = RunConfig(k=5, T=20, method="hals", seed=3)
    U, V, _ = nmf_run(M, cfg)
    Ud, Vd, _, _ = dsanls_run(M, cfg, 4)
    np.testing.assert_allclose(Ud, U, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(Vd, V, rtol=1e-8, atol=1e-12)


def test_imbalanced_partition_and_errors(M):
    part = Partition.from_widths(80, [40, 12, 12])
    cfg = RunConfig(k=5, T=10, seed=2)
    U1, V1, _, _ = dsanls_run(M, cfg, 1, monitor=False)
    U, V, _, _ = dsanls_run(M, cfg, 3, partition=part, monitor=False)
    np.testing.assert_array_equal(U, U1)
    with pytest.raises(InvalidConfigError):
        dsanls_run(M, cfg, 2, partition=part)
    with pytest.raises(InvalidConfigError):
        dsanls_run(M, cfg.replace(k=70), 2)


def test_unmonitored_trace(M):
    _, _, tr, _ = dsanls_run(M, RunConfig(k=5, T=2), 2, monitor=False)
    assert np.all(np.isnan(tr.rel_err))
