import random

import pytest

from lngate.crypto import SECP256K1, base_mul, ecdsa_verify, hash_digest
from lngate.threshold import (
    COMMITMENT_BASE, FUNDING, MASTER, DeviceParty, GatewayParty, Phase, Tag,
    ThresholdAbort, commitment_point, decode_round, derivation_tweak, derive_child,
    encode_round, new_session, reveal_revocation_secret, run_exchange, tkeygen, tsign,
)

import oracles

n = SECP256K1.n


@pytest.fixture(scope="module")
def keys():
    dev, gw, joint = tkeygen(random.Random(11), random.Random(12), count=2)
    return dev, gw, joint


def test_joint_key_is_product_of_shares(keys):
    dev, gw, joint = keys
    for slot in (FUNDING, COMMITMENT_BASE):
        x = dev[slot].share * gw[slot].share % n
        assert (joint[slot].x, joint[slot].y) == oracles.mul(x)
        assert dev[slot].joint_public_key == gw[slot].joint_public_key == joint[slot]
    # one encryption key serves every slot
    assert dev[0].he_keys is dev[1].he_keys
    assert dev[0].chain_code == gw[0].chain_code


def test_gateway_holds_only_ciphertext_of_device_share(keys):
    dev, gw, _ = keys
    enc = gw[FUNDING].encrypted_counterparty_material
    assert gw[FUNDING].he_keys is None
    assert dev[FUNDING].he_keys.decrypt(enc) == dev[FUNDING].share


def test_tsign_verifies_and_matches_oracle(keys):
    dev, gw, joint = keys
    rng = random.Random(7)
    for i in range(5):
        d = hash_digest(b"commitment %d" % i)
        k1, k2 = rng.randrange(1, n), rng.randrange(1, n)
        sig = tsign(new_session(rng), dev[0], gw[0], d, random.Random(i), random.Random(~i), (k1, k2))
        x = dev[0].share * gw[0].share % n
        assert (sig.r, sig.s) == oracles.ecdsa_sign(x, d.digest, k1 * k2 % n)
        assert oracles.openssl_verify((joint[0].x, joint[0].y), d.digest, sig.r, sig.s)


def test_signing_session_lifecycle(keys):
    dev, gw, _ = keys
    s = new_session(random.Random(1))
    sig = tsign(s, dev[0], gw[0], hash_digest(b"m"))
    assert s.phase is Phase.COMPLETE and s.signature == sig
    assert len(s.transcript) == 6
    with pytest.raises(ThresholdAbort):
        tsign(s, dev[0], gw[0], hash_digest(b"m2"))


def test_child_key_homomorphism(keys):
    dev, gw, joint = keys
    x = dev[COMMITMENT_BASE].share * gw[COMMITMENT_BASE].share % n
    for i in (0, 1, 2, 77, 2**31):
        t = oracles.hd_tweak((joint[1].x, joint[1].y), dev[1].chain_code, i)
        assert derivation_tweak(joint[1], dev[1].chain_code, i) == t
        cd, cg = derive_child(dev[1], i), derive_child(gw[1], i)
        assert cd.joint_public_key == cg.joint_public_key == t * joint[1]
        assert (cd.share * cg.share % n) == t * x % n
        assert commitment_point([dev[1], gw[1]], i) == t * joint[1]


def test_sign_under_child_key(keys):
    dev, gw, _ = keys
    cd, cg = derive_child(dev[1], 5), derive_child(gw[1], 5)
    d = hash_digest(b"state 5")
    sig = tsign(new_session(random.Random(2)), cd, cg, d)
    assert ecdsa_verify(cg.joint_public_key, d, sig)
    assert not ecdsa_verify(gw[1].joint_public_key, d, sig)


def test_derive_index_bounds(keys):
    with pytest.raises(ValueError):
        derive_child(keys[1][0], MASTER)
    with pytest.raises(ValueError):
        derive_child(keys[1][0], -1)


def test_derive_exchange_releases_older_secret(keys):
    dev, gw, _ = keys
    device = DeviceParty(random.Random(1), shares={COMMITMENT_BASE: dev[1]})
    gateway = GatewayParty(random.Random(2), shares={COMMITMENT_BASE: gw[1]})
    point, secret = run_exchange(gateway.derive(COMMITMENT_BASE, 1), device)
    assert secret is None and point == commitment_point([dev[1], gw[1]], 1)
    point, secret = run_exchange(gateway.derive(COMMITMENT_BASE, 2, reveal_index=1), device)
    assert base_mul(secret) == commitment_point([dev[1], gw[1]], 1)
    # the current state (2) and anything newer stay secret
    with pytest.raises(ThresholdAbort):
        run_exchange(gateway.reveal(COMMITMENT_BASE, 2), device)
    with pytest.raises(ThresholdAbort):
        run_exchange(gateway.derive(COMMITMENT_BASE, 3, reveal_index=3), device)


def test_reveal_revocation_secret(keys):
    dev, gw, _ = keys
    sigma = reveal_revocation_secret(dev[1], gw[1], 4)
    assert base_mul(sigma) == commitment_point([dev[1], gw[1]], 4)
    with pytest.raises(ThresholdAbort):
        reveal_revocation_secret(dev[1], gw[1], 4, device_authorizes=False)
    with pytest.raises(ThresholdAbort):
        reveal_revocation_secret(dev[1], gw[1], 4, gateway_authorizes=False)


@pytest.mark.parametrize("direction", ["to_device", "to_gateway"])
def test_tampered_frames_abort(keys, direction):
    dev, gw, _ = keys
    seen = []

    def flip(d, frame):
        if d == direction and len(seen) == 1:
            frame = frame[:-1] + bytes([frame[-1] ^ 1])
        if d == direction:
            seen.append(frame)
        return frame

    s = new_session(random.Random(3))
    with pytest.raises(ThresholdAbort):
        tsign(s, dev[0], gw[0], hash_digest(b"m"), tamper=flip)
    assert s.phase is Phase.ABORTED


def test_dropped_frame_aborts(keys):
    dev, gw, _ = keys
    s = new_session(random.Random(3))
    with pytest.raises(ThresholdAbort):
        tsign(s, dev[0], gw[0], hash_digest(b"m"), tamper=lambda d, f: None if d == "to_gateway" else f)
    assert s.phase is Phase.ABORTED


def test_offline_device_aborts(keys):
    dev, gw, _ = keys
    device = DeviceParty(random.Random(1), shares={FUNDING: dev[0]})
    device.online = False
    gateway = GatewayParty(random.Random(2), shares={FUNDING: gw[0]})
    with pytest.raises(ThresholdAbort):
        run_exchange(gateway.sign(hash_digest(b"m")), device)


def test_round_framing():
    sid = bytes(range(16))
    frame = encode_round(Tag.SIGN_INIT, sid, b"\x01" * 32, 0, 7)
    assert frame[0] == Tag.SIGN_INIT and int.from_bytes(frame[1:5], "big") == len(frame) - 5
    assert decode_round(frame) == (Tag.SIGN_INIT, (sid, b"\x01" * 32, 0, 7))
    for bad in (frame[:3], frame[:-1], frame + b"\x00", b"\x99" + frame[1:]):
        with pytest.raises(ThresholdAbort):
            decode_round(bad)
    with pytest.raises(ValueError):
        encode_round(Tag.SIGN_INIT, sid)
