"""Node request handling, release pool semantics and the client loop."""

import random
import socket
import threading

import pytest

from trr import ec_crypto as ec
from trr import node_runtime as nr
from trr.errors import GiveUp, PeerClosed, SizeMismatch, TrrTimeout
from trr.onion_routing import NodeDescriptor, Route, build_onion, decrypt_ack
from trr.simulator import BLOCK_INTERVAL_TICKS, SimConfig, SimWorld
from trr.wire_protocol import parse_ipv4

CLIENT_ADDR = (parse_ipv4("192.168.0.1"), 9)


@pytest.fixture
def world():
    return SimWorld(SimConfig(n_nodes=12, seed=101))


def make_onion(world, route_ids, tx, delay=1, seed=5, extra_hops=()):
    rng = random.Random(seed)
    hops = tuple(world.directory[i] for i in route_ids) + tuple(extra_hops)
    ret = ec.keygen_even(rng)
    return build_onion(tx, Route(hops), delay, ret, now=0, rng=rng), ret


class FakeConn:
    """Scripted inbound connection for serve_connection tests."""

    def __init__(self, frames):
        self.inbox = list(frames)
        self.sent = []
        self.closed = False

    def recv_frame(self):
        if not self.inbox:
            raise TrrTimeout("idle past timeout")
        return self.inbox.pop(0)

    def send_frame(self, command, payload):
        self.sent.append((command, payload))

    def peer_addr(self):
        return CLIENT_ADDR

    def close(self):
        self.closed = True


class TestServeConnection:
    def test_handshake_then_request(self, world):
        onion, ret = make_onion(world, [0], b"tx bytes")
        conn = FakeConn([("vertrr", b""), ("trr", onion)])
        nr.serve_connection(world.nodes[0], conn)
        assert conn.closed
        assert [c for c, _ in conn.sent] == ["vertrr", "track"]
        ack = decrypt_ack(conn.sent[1][1], ret.private)
        assert ack.errno == nr.ERR_OK

    def test_first_frame_not_vertrr_refused(self, world):
        onion, _ = make_onion(world, [0], b"tx")
        conn = FakeConn([("trr", onion)])
        nr.serve_connection(world.nodes[0], conn)
        assert conn.sent == []  # refused: no reply at all
        assert conn.closed

    def test_idle_after_handshake_closes(self, world):
        conn = FakeConn([("vertrr", b"")])
        nr.serve_connection(world.nodes[0], conn)
        assert conn.sent == [("vertrr", b"")]
        assert conn.closed

    def test_unpeelable_packet_closes_without_ack(self, world):
        onion, _ = make_onion(world, [1], b"tx")  # encrypted to node 1
        conn = FakeConn([("vertrr", b""), ("trr", onion)])
        nr.serve_connection(world.nodes[0], conn)
        assert [c for c, _ in conn.sent] == ["vertrr"]
        assert world.nodes[0].events[-1]["event"] == "peel_failed"


class TestHandleRequest:
    def test_release_enqueues_and_acks(self, world):
        node = world.nodes[3]
        onion, ret = make_onion(world, [3], b"the tx", delay=4)
        before = len(node.pool)
        ack = decrypt_ack(node.serve_request(onion, CLIENT_ADDR), ret.private)
        assert ack.errno == nr.ERR_OK
        assert ack.rpt_ip == node.descriptor.ip
        assert len(node.pool) == before + 1
        entry = node.pool[-1]
        assert entry.tx == b"the tx"
        assert entry.release_height == node.height + 4

    def test_forward_relays_ack_verbatim(self, world):
        onion, ret = make_onion(world, [0, 1], b"tx")
        raw_ack = world.nodes[0].serve_request(onion, CLIENT_ADDR)
        ack = decrypt_ack(raw_ack, ret.private)
        assert ack.errno == nr.ERR_OK
        assert ack.rpt_ip == world.nodes[1].descriptor.ip  # releasing node speaks
        assert world.nodes[1].pool

    def test_unreachable_next_hop_error_ack(self, world):
        dead = NodeDescriptor(node_id="dead", ip=parse_ipv4("10.9.9.9"),
                              port=8333, pubkey=ec.keygen(random.Random(1)).public)
        onion, ret = make_onion(world, [2], b"tx", extra_hops=(dead,))
        ack = decrypt_ack(world.nodes[2].serve_request(onion, CLIENT_ADDR),
                          ret.private)
        assert ack.errno == nr.ERR_UNREACHABLE
        assert ack.err_ip == dead.ip
        assert ack.rpt_ip == world.nodes[2].descriptor.ip

    def test_pool_capacity_boundary(self, world):
        assert nr.POOL_CAPACITY == 1000
        node = world.nodes[4]
        filler = nr.PendingRelease(b"x", nr.txid(b"x"), 99, bytes(32))
        node.pool = [filler] * node.pool_capacity  # the 1001st must bounce
        onion, ret = make_onion(world, [4], b"tx")
        ack = decrypt_ack(node.serve_request(onion, CLIENT_ADDR), ret.private)
        assert ack.errno == nr.ERR_POOL_FULL
        assert len(node.pool) == node.pool_capacity

    def test_invalid_tx_rejected(self, world):
        node = world.nodes[5]
        node.view.verify = lambda tx: False
        onion, ret = make_onion(world, [5], b"tx")
        ack = decrypt_ack(node.serve_request(onion, CLIENT_ADDR), ret.private)
        assert ack.errno == nr.ERR_INVALID_TX
        assert not node.pool


class TestOnNewBlock:
    @pytest.mark.parametrize("delay", [1, 2, 3, 4, 5])
    def test_broadcast_at_exact_height(self, world, delay):
        node = world.nodes[6]
        onion, _ = make_onion(world, [6], bytes([delay]) * 10, delay=delay)
        node.serve_request(onion, CLIENT_ADDR)
        start = node.height
        for h in range(start + 1, start + delay):
            assert node.on_new_block(h) == []
            assert node.pool
        released = node.on_new_block(start + delay)
        assert released == [bytes([delay]) * 10]
        assert not node.pool

    def test_delay_five_after_four_blocks_still_pending(self, world):
        node = world.nodes[7]
        onion, _ = make_onion(world, [7], b"patient tx", delay=5)
        node.serve_request(onion, CLIENT_ADDR)
        for h in range(1, 5):
            node.on_new_block(node.height + 1)
        assert node.pool

    def test_duplicate_release_broadcasts_once(self, world):
        tx = b"duplicated tx"
        n_a, n_b = world.nodes[8], world.nodes[9]
        onion_a, _ = make_onion(world, [8], tx, delay=1)
        onion_b, _ = make_onion(world, [9], tx, delay=2)
        n_a.serve_request(onion_a, CLIENT_ADDR)
        n_b.serve_request(onion_b, CLIENT_ADDR)
        assert n_a.on_new_block(1) == [tx]
        assert n_b.on_new_block(1) == []
        assert n_b.on_new_block(2) == []  # duplicate dropped silently
        announcements = [e for e in world.broadcast.log if e[2] == nr.txid(tx)]
        assert len(announcements) == 1
        assert any(e["event"] == "release_skipped_duplicate" for e in n_b.events)

    def test_height_must_increase(self, world):
        node = world.nodes[0]
        node.on_new_block(5)
        with pytest.raises(ValueError):
            node.on_new_block(5)
        with pytest.raises(ValueError):
            node.on_new_block(4)


class TestClientSend:
    def test_all_honest_first_round(self, world):
        report = world.send(b"fresh tx", nr.SendPolicy(num_routes=3, hops=3))
        assert report.success
        assert report.total_rounds == 1
        assert any(a.ok for a in report.rounds[0].attempts)

    def test_oversized_tx_rejected_before_io(self, world):
        calls = []
        orig = world.transport.request

        def recording(ip, port, packet, src_addr=None):
            calls.append(ip)
            return orig(ip, port, packet, src_addr=src_addr)

        world.transport.request = recording
        with pytest.raises(SizeMismatch):
            world.send(bytes(10241), nr.SendPolicy())
        assert calls == []

    def test_retry_round_on_transient_failure(self, world):
        orig = world.transport.request
        failures = [3]  # fail the whole first round (3 routes)

        def flaky(ip, port, packet, src_addr=None):
            if failures[0] > 0:
                failures[0] -= 1
                raise PeerClosed("injected failure")
            return orig(ip, port, packet, src_addr=src_addr)

        world.transport.request = flaky
        report = world.send(b"retry tx", nr.SendPolicy(num_routes=3, hops=2))
        assert report.success
        assert report.total_rounds == 2
        assert all(a.error for a in report.rounds[0].attempts)

    def test_give_up_when_network_hostile(self):
        hostile = SimWorld(SimConfig(n_nodes=8, dishonest_rate=1.0, seed=77))
        with pytest.raises(GiveUp) as exc_info:
            hostile.send(b"doomed", nr.SendPolicy(num_routes=2, hops=2,
                                                  retry_rounds=3))
        report = exc_info.value.report
        assert not report.success
        assert report.total_rounds == 3

    def test_release_never_before_first_block(self, world):
        world.send(b"slow tx", nr.SendPolicy(num_routes=3, hops=2,
                                             delays=(1, 3, 5)))
        assert world.broadcast.log
        assert all(tick >= BLOCK_INTERVAL_TICKS
                   for tick, _, _ in world.broadcast.log)

    def test_no_amplification_and_no_plaintext_exposure(self, world):
        tx = b"\xabsecret transaction payload\xcd" * 4
        packets = []
        orig = world.transport.request

        def recording(ip, port, packet, src_addr=None):
            packets.append((ip, port, bytes(packet), src_addr))
            return orig(ip, port, packet, src_addr=src_addr)

        world.transport.request = recording
        policy = nr.SendPolicy(num_routes=2, hops=3, delays=(1, 1))
        report = world.send(tx, policy)
        assert report.success
        # exactly hops messages per route, none carrying the plaintext
        assert len(packets) == policy.num_routes * policy.hops
        assert all(tx not in pkt for _, _, pkt, _ in packets)
        # the releasing hop heard from the middle hop, not the client
        releasing_requests = [src for ip, port, _, src in packets
                              if any(ip == world.directory[i].ip
                                     for a in report.rounds[0].attempts
                                     for i in [a.hop_ids[-1]])]
        assert all(src != world.client_addr for src in releasing_requests)


class TestFrameSocket:
    def test_roundtrip_over_socketpair(self):
        a, b = socket.socketpair()
        left, right = nr.FrameSocket(a, 2.0), nr.FrameSocket(b, 2.0)
        left.send_frame("vertrr", b"")
        assert right.recv_frame() == ("vertrr", b"")
        right.send_frame("track", b"\x01\x02")
        assert left.recv_frame() == ("track", b"\x01\x02")
        left.close(), right.close()

    def test_timeout(self):
        a, b = socket.socketpair()
        left = nr.FrameSocket(a, 0.1)
        with pytest.raises(TrrTimeout):
            left.recv_frame()
        left.close(), b.close()

    def test_peer_closed(self):
        a, b = socket.socketpair()
        left = nr.FrameSocket(a, 1.0)
        b.close()
        with pytest.raises(PeerClosed):
            left.recv_frame()
        left.close()

    def test_request_over_tcp_server(self, world):
        node = world.nodes[0]
        stop = threading.Event()
        server = threading.Thread(
            target=nr.run_node_server, args=(node, "127.0.0.1", 18451),
            kwargs={"timeout": 2.0, "stop_event": stop}, daemon=True)
        server.start()
        try:
            onion, ret = make_onion(world, [0], b"tcp tx")
            transport = nr.TcpTransport(timeout=2.0)
            deadline = 50
            while deadline:
                try:
                    raw = transport.request(parse_ipv4("127.0.0.1"), 18451, onion)
                    break
                except Exception:
                    deadline -= 1
                    threading.Event().wait(0.05)
            ack = decrypt_ack(raw, ret.private)
            assert ack.errno == nr.ERR_OK
        finally:
            stop.set()
            server.join(timeout=3)
