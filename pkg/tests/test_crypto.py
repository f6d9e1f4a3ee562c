import random

import pytest
from hypothesis import given, settings, strategies as st

from lngate.crypto import (
    SECP256K1, TINY, CryptoError, EcdsaSignature, MessageDigest, Point, base_mul,
    ecdsa_sign, ecdsa_verify, hash_digest, he_add, he_decrypt, he_encrypt, he_scalar_mul,
    low_s, paillier_keygen, prove_dlog, random_scalar, verify_dlog,
)

import oracles

scalars = st.integers(min_value=1, max_value=SECP256K1.n - 1)


@settings(max_examples=40, deadline=None)
@given(scalars)
def test_base_mul_matches_affine_oracle(k):
    P = base_mul(k)
    assert (P.x, P.y) == oracles.mul(k)


@settings(max_examples=25, deadline=None)
@given(scalars, scalars)
def test_point_addition_is_scalar_addition(a, b):
    assert base_mul(a) + base_mul(b) == base_mul((a + b) % SECP256K1.n)


def test_known_multiple_of_generator():
    two_g = base_mul(2)
    assert two_g.x == 0xC6047F9441ED7D6D3045406E95C07CD85C778E4B8CEF3CA7ABAC09B95C709EE5


def test_infinity_and_negation():
    G = SECP256K1.G
    assert (G + (-G)).is_infinity
    assert (SECP256K1.n * G).is_infinity
    assert (G - G).is_infinity


def test_point_encoding_round_trip():
    rng = random.Random(3)
    for _ in range(20):
        P = base_mul(random_scalar(rng))
        assert Point.decode(P.encode()) == P
    with pytest.raises(CryptoError):
        Point.decode(b"\x04" + bytes(32))
    with pytest.raises(CryptoError):
        Point(1, 1)


def test_tiny_curve_group_order():
    G = TINY.G
    seen = set()
    P = G
    for _ in range(TINY.n - 1):
        seen.add((P.x, P.y))
        P = P + G
    assert P.is_infinity
    assert len(seen) == TINY.n - 1


@settings(max_examples=30, deadline=None)
@given(scalars, scalars, st.binary(min_size=1, max_size=64))
def test_ecdsa_sign_matches_oracle_and_openssl(priv, nonce, msg):
    d = hash_digest(msg)
    sig = ecdsa_sign(priv, d, nonce)
    assert (sig.r, sig.s) == oracles.ecdsa_sign(priv, d.digest, nonce)
    assert oracles.openssl_verify(oracles.mul(priv), d.digest, sig.r, sig.s)
    assert ecdsa_verify(base_mul(priv), d, sig)


def test_ecdsa_rejects_tampering():
    d = hash_digest(b"pay 1 BTC")
    sig = ecdsa_sign(12345, d, 777)
    pub = base_mul(12345)
    assert not ecdsa_verify(pub, hash_digest(b"pay 2 BTC"), sig)
    assert not ecdsa_verify(base_mul(12346), d, sig)
    assert not ecdsa_verify(pub, d, EcdsaSignature(sig.r, 0))
    assert not ecdsa_verify(pub, d, EcdsaSignature(sig.r, (sig.s + 1) % SECP256K1.n))


def test_low_s_normalisation():
    n = SECP256K1.n
    assert low_s(n - 1) == 1
    assert low_s(5) == 5
    sig = ecdsa_sign(99, hash_digest(b"m"), 4242)
    assert sig.s <= n // 2


def test_signature_encoding_round_trip():
    sig = ecdsa_sign(99, hash_digest(b"m"), 4242)
    assert EcdsaSignature.decode(sig.encode()) == sig
    with pytest.raises(CryptoError):
        EcdsaSignature.decode(b"\x00" * 10)


def test_out_of_range_inputs():
    d = hash_digest(b"m")
    with pytest.raises(CryptoError):
        ecdsa_sign(0, d, 5)
    with pytest.raises(CryptoError):
        ecdsa_sign(5, d, SECP256K1.n)


def test_digest_scalar_uses_leftmost_bits():
    d = MessageDigest(b"\xff" * 32)
    assert d.scalar() == (2**256 - 1) % SECP256K1.n
    # on the tiny curve only the top 11 bits count
    assert d.scalar(TINY) == (2**11 - 1) % TINY.n


def test_dlog_proof():
    rng = random.Random(1)
    x = random_scalar(rng)
    X = base_mul(x)
    pf = prove_dlog(x, X, rng, b"ctx")
    assert verify_dlog(X, pf, b"ctx")
    assert not verify_dlog(X, pf, b"other")
    assert not verify_dlog(base_mul(x + 1), pf, b"ctx")


def test_paillier_homomorphism():
    rng = random.Random(5)
    keys = paillier_keygen(256, rng)
    a, b, t = 123456789, 987654321, 31337
    ca, cb = he_encrypt(keys.public, a, rng), he_encrypt(keys.public, b, rng)
    assert he_decrypt(keys, he_add(ca, cb)) == a + b
    assert he_decrypt(keys, he_scalar_mul(ca, t)) == a * t
    other = paillier_keygen(256, random.Random(6))
    with pytest.raises(CryptoError):
        he_add(ca, he_encrypt(other.public, 1, rng))
    with pytest.raises(CryptoError):
        he_encrypt(keys.public, keys.public.N, rng)
