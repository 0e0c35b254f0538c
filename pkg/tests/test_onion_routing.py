"""Route selection statistics and onion build/peel round trips."""

import itertools
import random

import pytest

from trr import ec_crypto as ec
from trr.errors import InsufficientNodes, MalformedCipher, MalformedRouting
from trr.onion_routing import (
    Forward,
    NodeDescriptor,
    Release,
    Route,
    build_onion,
    decrypt_ack,
    encrypt_ack,
    peel_layer,
    return_key_point,
    select_routes,
)
from trr.wire_protocol import TrrAck, parse_ipv4


@pytest.fixture(scope="module")
def keypool():
    rng = random.Random(7)
    return [ec.keygen(rng) for _ in range(10)]


@pytest.fixture(scope="module")
def directory(keypool):
    return [NodeDescriptor(node_id=i, ip=parse_ipv4(f"10.0.0.{i + 1}"),
                           port=8333, pubkey=kp.public)
            for i, kp in enumerate(keypool)]


def build_and_peel(tx, hops, keypool, directory, rng, delay=1):
    route = Route(tuple(directory[:hops]))
    ret = ec.keygen_even(rng)
    packet = build_onion(tx, route, delay, ret, now=0, rng=rng)
    for i in range(hops - 1):
        peeled = peel_layer(packet, keypool[i].private)
        assert isinstance(peeled, Forward)
        assert peeled.next_ip == directory[i + 1].ip
        assert peeled.next_port == directory[i + 1].port
        packet = peeled.remaining
    final = peel_layer(packet, keypool[hops - 1].private)
    assert isinstance(final, Release)
    return final, ret


class TestSelectRoutes:
    def test_uniform_over_permutations(self, directory):
        # 3 nodes, 3 hops: the 6 orderings should be equally likely
        rng = random.Random(11)
        small = directory[:3]
        counts = {perm: 0 for perm in itertools.permutations(range(3))}
        draws = 10_000
        for _ in range(draws):
            (route,) = select_routes(small, 1, 3, rng)
            counts[tuple(h.node_id for h in route.hops)] += 1
        expected = draws / 6
        chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
        assert chi2 < 20.52  # chi-square 0.001 critical value, df=5

    def test_insufficient_nodes(self, directory):
        with pytest.raises(InsufficientNodes):
            select_routes(directory[:3], 1, 4, random.Random(0))

    def test_exclude_self(self, directory):
        rng = random.Random(3)
        for _ in range(200):
            (route,) = select_routes(directory[:4], 1, 3, rng, exclude_id=0)
            assert 0 not in {h.node_id for h in route.hops}

    def test_hops_distinct_within_route(self, directory):
        rng = random.Random(5)
        for _ in range(100):
            routes = select_routes(directory, 3, 5, rng)
            for route in routes:
                ids = [h.node_id for h in route.hops]
                assert len(set(ids)) == len(ids)

    def test_independent_routes_collision_rate(self, directory):
        # with 3 nodes and 3 hops each route is one of 6 permutations,
        # so two independent routes collide with probability 1/6
        rng = random.Random(17)
        small = directory[:3]
        pairs = same = 0
        for _ in range(10_000):
            routes = select_routes(small, 3, 3, rng)
            ids = [tuple(h.node_id for h in r.hops) for r in routes]
            for a, b in itertools.combinations(ids, 2):
                pairs += 1
                same += a == b
        assert abs(same / pairs - 1 / 6) < 0.01

    def test_bad_parameters(self, directory):
        with pytest.raises(ValueError):
            select_routes(directory, 1, 0, random.Random(0))
        with pytest.raises(ValueError):
            select_routes(directory, 1, 11, random.Random(0))
        with pytest.raises(ValueError):
            select_routes(directory, 0, 3, random.Random(0))


class TestOnion:
    def test_single_hop_release(self, keypool, directory):
        rng = random.Random(23)
        final, _ = build_and_peel(b"small tx", 1, keypool, directory, rng, delay=2)
        assert final.trr_data.tx == b"small tx"
        assert final.trr_data.release_delay == 2

    def test_three_hop_chain(self, keypool, directory):
        # client -> A -> B -> C: A forwards to B, B to C, C releases
        rng = random.Random(29)
        tx = rng.randbytes(300)
        final, _ = build_and_peel(tx, 3, keypool, directory, rng)
        assert final.trr_data.tx == tx

    def test_roundtrip_many_routes(self, keypool, directory):
        rng = random.Random(31)
        for _ in range(40):
            hops = rng.randint(1, 10)
            tx = rng.randbytes(rng.randint(1, 400))
            final, _ = build_and_peel(tx, hops, keypool, directory, rng)
            assert final.trr_data.tx == tx

    def test_roundtrip_thousand_pairs(self, keypool, directory):
        # peel composition is exact for a thousand random (tx, route) pairs
        rng = random.Random(101)
        for _ in range(1000):
            hops = rng.randint(1, 10)
            tx = rng.randbytes(rng.randint(1, 120))
            final, _ = build_and_peel(tx, hops, keypool, directory, rng)
            assert final.trr_data.tx == tx

    def test_wrong_key_raises_malformed_routing(self, keypool, directory):
        rng = random.Random(37)
        route = Route(tuple(directory[:3]))
        packet = build_onion(b"tx", route, 1, ec.keygen_even(rng), 0, rng)
        with pytest.raises(MalformedRouting):
            peel_layer(packet, keypool[5].private)

    def test_layer_isolation(self, keypool, directory):
        # hop i's key opens only layer i
        rng = random.Random(41)
        route = Route(tuple(directory[:4]))
        packet = build_onion(b"tx bytes", route, 1, ec.keygen_even(rng), 0, rng)
        for wrong in (1, 2, 3):
            with pytest.raises(MalformedRouting):
                peel_layer(packet, keypool[wrong].private)

    def test_garbage_packet_malformed_cipher(self):
        with pytest.raises(MalformedCipher):
            peel_layer(b"\x01\x02\x03", 12345)

    def test_forwarded_bytes_rerandomized(self, keypool, directory):
        # no >= 8-byte substring survives a hop: each layer is fresh
        # ciphertext, so a relay's output is unlinkable to its input
        rng = random.Random(43)
        route = Route(tuple(directory[:3]))
        packet = build_onion(rng.randbytes(200), route, 1,
                             ec.keygen_even(rng), 0, rng)
        peeled = peel_layer(packet, keypool[0].private)
        received_grams = {packet[i:i + 8] for i in range(len(packet) - 7)}
        forwarded = peeled.remaining
        shared = [forwarded[i:i + 8] for i in range(len(forwarded) - 7)
                  if forwarded[i:i + 8] in received_grams]
        assert not shared

    def test_onion_size_function_of_lengths_only(self, keypool, directory):
        rng = random.Random(47)
        ret = ec.keygen_even(rng)
        route_a = Route(tuple(directory[:5]))
        route_b = Route(tuple(directory[5:10]))
        a = build_onion(b"\x00" * 256, route_a, 1, ret, 0, rng)
        b = build_onion(rng.randbytes(256), route_b, 5, ret, 999, rng)
        assert len(a) == len(b)

    def test_delay_travels_inside(self, keypool, directory):
        rng = random.Random(53)
        for delay in (1, 5):
            final, _ = build_and_peel(b"x", 2, keypool, directory, rng, delay=delay)
            assert final.trr_data.release_delay == delay

    def test_return_pubkey_present_at_every_hop(self, keypool, directory):
        rng = random.Random(59)
        route = Route(tuple(directory[:3]))
        ret = ec.keygen_even(rng)
        expected = ret.public.x.to_bytes(32, "big")
        packet = build_onion(b"tx", route, 1, ret, 0, rng)
        for i in range(3):
            peeled = peel_layer(packet, keypool[i].private)
            if isinstance(peeled, Forward):
                assert peeled.return_pubkey == expected
                packet = peeled.remaining
            else:
                assert peeled.return_pubkey == expected

    def test_odd_return_key_rejected(self, keypool, directory):
        rng = random.Random(61)
        kp = ec.keygen(rng)
        while kp.public.y % 2 == 0:
            kp = ec.keygen(rng)
        with pytest.raises(ValueError):
            build_onion(b"tx", Route(tuple(directory[:2])), 1, kp, 0, rng)


class TestAckPath:
    def test_roundtrip(self):
        rng = random.Random(67)
        ret = ec.keygen_even(rng)
        ack = TrrAck(1, 12345, parse_ipv4("10.0.0.9"), 0, 0, b"")
        blob = encrypt_ack(ack, ret.public, rng)
        assert decrypt_ack(blob, ret.private) == ack

    def test_point_reconstruction_from_x(self):
        rng = random.Random(71)
        ret = ec.keygen_even(rng)
        x32 = ret.public.x.to_bytes(32, "big")
        assert return_key_point(x32) == ret.public

    def test_success_ack_ciphertext_constant_length(self):
        # 45-byte acks: 4-byte prefix + 45 = 49 -> 2 chunks -> 70 + 33
        rng = random.Random(73)
        ret = ec.keygen_even(rng)
        sizes = set()
        for t in range(10):
            ack = TrrAck(1, t, t, 0, 0, b"")
            sizes.add(len(encrypt_ack(ack, ret.public, rng)))
        assert sizes == {33 + 4 + 2 * 33}

    def test_wrong_key_never_crashes(self):
        rng = random.Random(79)
        ret, other = ec.keygen_even(rng), ec.keygen_even(rng)
        blob = encrypt_ack(TrrAck(1, 0, 0, 0, 0, b"ok"), ret.public, rng)
        with pytest.raises(MalformedCipher):
            decrypt_ack(blob, other.private)

    def test_truncated_blob(self):
        rng = random.Random(83)
        ret = ec.keygen_even(rng)
        blob = encrypt_ack(TrrAck(1, 0, 0, 0, 0, b""), ret.public, rng)
        with pytest.raises(MalformedCipher):
            decrypt_ack(blob[:50], ret.private)
