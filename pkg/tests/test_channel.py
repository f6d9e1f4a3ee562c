import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from lngate.channel import (
    SAT_PER_BTC, CannotRevokeCurrent, Channel, ChannelError, ChannelKeys, ChannelParams,
    CommitmentState, Direction, Holder, InsufficientBalance, InsufficientFunds, NotExpired, Party,
    PendingHtlcs, RevokedState, UnknownHash, apply_receive, apply_send, build_closing_tx,
    build_commitment_tx, build_funding_tx, build_sweep_tx, commitment_locktime, fail_htlc,
    find_output, fulfill_htlc, initial_state, revocation_privkey, sign_digest, sign_single,
)
from lngate.crypto import base_mul, sha256
from lngate.ledger import (
    Chain, Multisig2of2, Outpoint, Path, PayToKey, PayToKeyUnconditional, ToSelfDelayed, Witness,
)

BTC = SAT_PER_BTC
C = 10 * BTC
PRE = b"\x07" * 32
H = sha256(PRE)

# secrets for every key a channel needs
SECRETS = dict(
    funding_joint=101, bridge_funding=102, iot=103, gateway_payment=104, gateway_delayed=105,
    gateway_revocation_base=106, bridge_payment=107, bridge_delayed=108, bridge_revocation_base=109,
)
KEYS = ChannelKeys(**{k: base_mul(v) for k, v in SECRETS.items()})
FUNDING = Outpoint(b"\x01" * 32, 0)


def params(**kw):
    return ChannelParams(capacity=C, **kw)


def test_funding_tx():
    op = Outpoint(b"\x02" * 32, 1)
    tx = build_funding_tx((op, C + 222), C, KEYS.funding_joint, KEYS.bridge_funding, KEYS.iot)
    assert [o.amount for o in tx.outputs] == [C] and tx.fee == 222
    assert isinstance(tx.outputs[0].condition, Multisig2of2)
    tx = build_funding_tx((op, 12 * BTC), C, KEYS.funding_joint, KEYS.bridge_funding, KEYS.iot)
    assert tx.outputs[1].amount == 2 * BTC - 222
    assert tx.output_total + tx.fee == 12 * BTC
    with pytest.raises(InsufficientFunds):
        build_funding_tx((op, C), C, KEYS.funding_joint, KEYS.bridge_funding, KEYS.iot)


def test_send_then_fulfill_gives_the_example_split():
    p = params()
    s = apply_send(initial_state(p), 1 * BTC, p, H, height=10)
    assert (s.x, s.y, s.z) == (9 * BTC, 0, BTC // 10)
    assert [h.amount for h in s.htlcs] == [9 * BTC // 10] and s.htlcs[0].expiry == 50
    assert s.total == C and s.index == 1
    s = fulfill_htlc(s, PRE)
    assert (s.x, s.y, s.z) == (9 * BTC, 9 * BTC // 10, BTC // 10) and not s.htlcs


def test_send_errors_and_zero_rate():
    p = params()
    with pytest.raises(InsufficientBalance):
        apply_send(initial_state(p), C + 1, p, H, 0)
    p0 = params(service_fee_rate=Fraction(0))
    s = apply_send(initial_state(p0), BTC, p0, H, 0)
    assert s.htlcs[0].amount == BTC and s.z == 0


def test_receive_has_no_fee():
    p = params()
    s = CommitmentState(3, 9 * BTC, 9 * BTC // 10, BTC // 10)
    s = apply_receive(s, BTC // 2, p, H, 0)
    assert s.z == BTC // 10 and s.htlcs[0].direction is Direction.RECEIVED
    s = fulfill_htlc(s, PRE)
    assert (s.x, s.y, s.z) == (95 * BTC // 10, 4 * BTC // 10, BTC // 10)
    with pytest.raises(InsufficientBalance):
        apply_receive(initial_state(p), 1, p, H, 0)


def test_fulfill_and_fail_rules():
    p = params()
    s = apply_send(initial_state(p), BTC, p, H, height=0)
    with pytest.raises(UnknownHash):
        fulfill_htlc(s, b"\x08" * 32)
    with pytest.raises(NotExpired):
        fail_htlc(s, H, height=39)
    back = fail_htlc(s, H, height=40)
    # the refund returns the HTLC amount; the service fee was earned on the send
    assert (back.x, back.z) == (C - BTC // 10, BTC // 10) and back.total == C


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["send", "receive"]), st.integers(1, 3 * BTC)), max_size=12))
def test_trajectory_invariants(ops):
    p = params()
    s = initial_state(p)
    s = CommitmentState(0, s.x - 2 * BTC, 2 * BTC, 0)
    for i, (kind, amount) in enumerate(ops):
        pre = bytes([i]) * 32
        before = s
        try:
            if kind == "send":
                s = apply_send(s, amount, p, sha256(pre), 0)
            else:
                s = apply_receive(s, amount, p, sha256(pre), 0)
        except (InsufficientBalance, ValueError):
            continue
        s = fulfill_htlc(s, pre)
        assert s.total == C
        assert s.z >= before.z
        if kind == "receive":
            assert s.z == before.z and s.x > before.x and s.y < before.y
        else:
            assert s.z - before.z == int(amount * Fraction(1, 10))


def test_commitment_outputs():
    p = params()
    s = apply_send(initial_state(p), BTC, p, H, 0)
    ch = Channel(p, KEYS, FUNDING)
    ch.advance(s)
    ch.set_point(Holder.GATEWAY, 1, base_mul(77))
    tx = ch.commitment_tx(Holder.GATEWAY)
    amounts = [(type(o.condition).__name__, o.amount) for o in tx.outputs]
    assert amounts == [
        ("PayToKeyUnconditional", 9 * BTC), ("ToSelfDelayed", BTC // 10), ("HtlcOffered", 9 * BTC // 10),
    ]
    assert tx.locktime == commitment_locktime(1, Holder.GATEWAY)
    fresh = build_commitment_tx(initial_state(p), Holder.BRIDGE, KEYS, p, FUNDING)
    assert [o.amount for o in fresh.outputs] == [C]


def test_commitment_versions_are_symmetric():
    p = params()
    s = CommitmentState(2, 8 * BTC, BTC, BTC, gateway_point=base_mul(5), bridge_point=base_mul(6))
    g = build_commitment_tx(s, Holder.GATEWAY, KEYS, p, FUNDING)
    b = build_commitment_tx(s, Holder.BRIDGE, KEYS, p, FUNDING)
    assert isinstance(g.outputs[1].condition, ToSelfDelayed) and g.outputs[1].condition.owner_key == KEYS.gateway_delayed
    assert isinstance(b.outputs[1].condition, ToSelfDelayed) and b.outputs[1].condition.owner_key == KEYS.bridge_delayed
    assert g.outputs[2].condition == PayToKey(KEYS.bridge_payment)
    assert b.outputs[2].condition == PayToKey(KEYS.gateway_payment)
    assert g.outputs[0] == b.outputs[0]


def test_revoke_state():
    p = params()
    ch = Channel(p, KEYS, FUNDING)
    secret = 4242
    ch.set_point(Holder.BRIDGE, 0, base_mul(secret))
    with pytest.raises(CannotRevokeCurrent):
        ch.revoke_state(Holder.BRIDGE, 0, secret)
    ch.advance(apply_send(ch.current, BTC, p, H, 0))
    with pytest.raises(ChannelError):
        ch.revoke_state(Holder.BRIDGE, 0, secret + 1)
    rec = ch.revoke_state(Holder.BRIDGE, 0, secret)
    assert rec.secret == secret and ch.is_revoked(Holder.BRIDGE, 0)
    assert "revoked_by=B" in ch.dump().splitlines()[0]


def test_revoked_commitment_is_swept_by_counterparty():
    """Bridge broadcasts state 0 after revealing its secret; the gateway takes the bridge output."""
    rng = random.Random(9)
    p = params(to_self_delay=5)
    chain = Chain()
    src = chain.faucet(KEYS.iot, C + 222)
    chain.mine_block()
    fund = build_funding_tx((src, C + 222), C, KEYS.funding_joint, KEYS.bridge_funding, KEYS.iot)
    fund = sign_single(fund, Path.KEY, SECRETS["iot"], rng)
    assert chain.submit(fund)
    chain.mine(3)
    ch = Channel(p, KEYS, fund.outpoint(0))
    point_secret = 999
    ch.states[0] = CommitmentState(0, 8 * BTC, BTC, BTC, bridge_point=base_mul(point_secret))
    ch.advance(CommitmentState(1, 9 * BTC, BTC // 2, BTC // 2))
    ch.revoke_state(Holder.BRIDGE, 0, point_secret)
    with pytest.raises(RevokedState):
        ch.commitment_tx(Holder.BRIDGE, 0)
    old = ch.commitment_tx(Holder.BRIDGE, 0, allow_revoked=True)
    sigs = (sign_digest(SECRETS["funding_joint"], old, rng), sign_digest(SECRETS["bridge_funding"], old, rng))
    old = old.with_witnesses([Witness(Path.MULTISIG, sigs)])
    assert chain.submit(old)
    chain.mine_block()
    i = find_output(old, ToSelfDelayed)
    rev_key = revocation_privkey(SECRETS["gateway_revocation_base"], point_secret)
    sweep = sign_single(build_sweep_tx(old, i, KEYS.gateway_payment), Path.REVOCATION, rev_key, rng)
    assert chain.submit(sweep)
    # IoT output needs no waiting at all
    j = find_output(old, PayToKeyUnconditional)
    iot = sign_single(build_sweep_tx(old, j, KEYS.iot), Path.KEY, SECRETS["iot"], rng)
    assert chain.submit(iot)
    chain.mine_block()
    assert chain.balance_of(KEYS.gateway_payment) == BTC + BTC
    assert chain.balance_of(KEYS.iot) == 8 * BTC


def test_closing_tx_fee_payer():
    s = CommitmentState(5, 9 * BTC, 9 * BTC // 10, BTC // 10)
    tx = build_closing_tx(s, 183, Party.IOT, KEYS, FUNDING)
    assert [o.amount for o in tx.outputs] == [9 * BTC - 183, 9 * BTC // 10, BTC // 10]
    tx = build_closing_tx(s, 183, Party.GATEWAY, KEYS, FUNDING)
    assert tx.outputs[2].amount == BTC // 10 - 183 and tx.outputs[0].amount == 9 * BTC
    p = params()
    with pytest.raises(PendingHtlcs):
        build_closing_tx(apply_send(s, BTC, p, H, 0), 183, Party.IOT, KEYS, FUNDING)
    with pytest.raises(InsufficientBalance):
        build_closing_tx(CommitmentState(0, C, 0, 0), 183, Party.GATEWAY, KEYS, FUNDING)


def test_params_validation():
    with pytest.raises(ValueError):
        ChannelParams(capacity=0)
    with pytest.raises(ValueError):
        ChannelParams(capacity=1, funding_depth=0)
    with pytest.raises(ValueError):
        ChannelParams(capacity=1, service_fee_rate=Fraction(-1))
    p = params()
    assert (p.open_fee, p.close_fee, p.funding_depth, p.to_self_delay, p.htlc_timeout) == (222, 183, 3, 144, 40)


def test_channel_rejects_non_conserving_state():
    ch = Channel(params(), KEYS, FUNDING)
    with pytest.raises(ChannelError):
        ch.advance(CommitmentState(1, C, 1, 0))
    with pytest.raises(ChannelError):
        ch.advance(CommitmentState(2, C, 0, 0))
