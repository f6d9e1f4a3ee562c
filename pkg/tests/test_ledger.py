import random

import pytest

from lngate.channel import revocation_privkey, revocation_pubkey, sign_digest
from lngate.crypto import base_mul, sha256
from lngate.ledger import (
    Chain, HtlcOffered, Multisig2of2, Path, PayToKey, PayToKeyUnconditional, RejectReason,
    ToSelfDelayed, Transaction, TxIn, TxOut, UnknownTransaction, Witness,
)

rng = random.Random(42)
ALICE, BOB, CAROL = 11, 22, 33
A, B, Cpt = base_mul(ALICE), base_mul(BOB), base_mul(CAROL)


def spend(chain, outpoint, amount, cond, path, *secrets, fee=0, preimage=None):
    tx = Transaction((TxIn(outpoint),), (TxOut(amount - fee, cond),), fee)
    sigs = tuple(sign_digest(s, tx, rng) for s in secrets)
    return tx.with_witnesses([Witness(path, sigs, preimage)])


def funded(amount=1000, key=A):
    chain = Chain()
    op = chain.faucet(key, amount)
    chain.mine_block()
    return chain, op


def test_pay_to_key_spend_and_fee_accounting():
    chain, op = funded()
    tx = spend(chain, op, 1000, PayToKey(B), Path.KEY, ALICE, fee=10)
    assert chain.submit(tx)
    chain.mine_block()
    assert chain.balance_of(B) == 990
    assert chain.fees == 10
    assert chain.confirmed_value() == chain.funded - chain.fees


def test_wrong_key_and_missing_utxo():
    chain, op = funded()
    r = chain.submit(spend(chain, op, 1000, PayToKey(B), Path.KEY, BOB))
    assert r.reason is RejectReason.BAD_SIGNATURE
    ghost = spend(chain, op, 1000, PayToKey(B), Path.KEY, ALICE)
    ghost = Transaction((TxIn(type(op)(b"\x00" * 32, 0), ghost.inputs[0].witness),), ghost.outputs)
    assert chain.submit(ghost).reason is RejectReason.MISSING_UTXO


def test_value_mismatch_rejected():
    chain, op = funded()
    tx = Transaction((TxIn(op),), (TxOut(1001, PayToKey(B)),))
    tx = tx.with_witnesses([Witness(Path.KEY, (sign_digest(ALICE, tx, rng),))])
    assert chain.submit(tx).reason is RejectReason.VALUE_MISMATCH


def test_signature_binds_transaction():
    chain, op = funded()
    good = spend(chain, op, 1000, PayToKey(B), Path.KEY, ALICE)
    mutated = Transaction(good.inputs, (TxOut(1000, PayToKey(Cpt)),))
    assert chain.submit(mutated).reason is RejectReason.BAD_SIGNATURE
    assert chain.submit(good)


def test_multisig_needs_both():
    chain, op = funded()
    cond = Multisig2of2(A, B)
    tx1 = spend(chain, op, 1000, cond, Path.KEY, ALICE)
    assert chain.submit(tx1)
    chain.mine_block()
    ms = tx1.outpoint(0)
    assert chain.submit(spend(chain, ms, 1000, PayToKey(Cpt), Path.MULTISIG, ALICE)).reason \
        is RejectReason.BAD_SIGNATURE
    assert chain.submit(spend(chain, ms, 1000, PayToKey(Cpt), Path.MULTISIG, BOB, ALICE)).reason \
        is RejectReason.BAD_SIGNATURE
    assert chain.submit(spend(chain, ms, 1000, PayToKey(Cpt), Path.MULTISIG, ALICE, BOB))


@pytest.mark.parametrize("k", [1, 3, 144])
def test_to_self_delay_boundary_and_revocation_supremacy(k):
    base_secret, point_secret = 5, 7
    rev = revocation_pubkey(base_mul(base_secret), base_mul(point_secret))
    assert base_mul(revocation_privkey(base_secret, point_secret)) == rev
    chain, op = funded()
    lock = spend(chain, op, 1000, ToSelfDelayed(A, rev, k), Path.KEY, ALICE)
    assert chain.submit(lock)
    out = lock.outpoint(0)
    owner = spend(chain, out, 1000, PayToKey(A), Path.OWNER, ALICE)
    penalty = spend(chain, out, 1000, PayToKey(B), Path.REVOCATION, revocation_privkey(base_secret, point_secret))
    # unconfirmed source: neither path
    assert chain.submit(penalty).reason is RejectReason.TIMELOCK_NOT_MET
    chain.mine_block()
    assert chain.confirmations(lock.txid) == 1
    if k > 1:
        chain.mine(k - 2)
        assert chain.confirmations(lock.txid) == k - 1
        assert chain.submit(owner).reason is RejectReason.TIMELOCK_NOT_MET
        # any depth in 1..k-1 lets the revocation path through first
        assert chain.submit(penalty)
        assert chain.submit(owner).reason is RejectReason.CONFLICT
    else:
        assert chain.submit(owner)


def test_owner_path_at_depth_k():
    chain, op = funded()
    lock = spend(chain, op, 1000, ToSelfDelayed(A, B, 3), Path.KEY, ALICE)
    chain.submit(lock)
    chain.mine(3)
    assert chain.submit(spend(chain, lock.outpoint(0), 1000, PayToKey(A), Path.OWNER, ALICE))


def test_htlc_claim_and_refund():
    pre = b"\x05" * 32
    h = sha256(pre)
    chain, op = funded()
    lock = spend(chain, op, 1000, HtlcOffered(h, B, A, 40), Path.KEY, ALICE)
    chain.submit(lock)
    chain.mine_block()
    out = lock.outpoint(0)
    wrong = spend(chain, out, 1000, PayToKey(B), Path.CLAIM, BOB, preimage=b"\x06" * 32)
    assert chain.submit(wrong).reason is RejectReason.BAD_PREIMAGE
    refund = spend(chain, out, 1000, PayToKey(A), Path.REFUND, ALICE)
    chain.mine(38)
    assert chain.submit(refund).reason is RejectReason.TIMELOCK_NOT_MET
    chain.mine_block()
    assert chain.confirmations(lock.txid) == 40
    claim = spend(chain, out, 1000, PayToKey(B), Path.CLAIM, BOB, preimage=pre)
    assert chain.submit(claim)
    assert chain.submit(refund).reason is RejectReason.CONFLICT


def test_unconditional_output_spendable_at_depth_one():
    chain, op = funded()
    lock = spend(chain, op, 1000, PayToKeyUnconditional(Cpt), Path.KEY, ALICE)
    chain.submit(lock)
    chain.mine_block()
    assert chain.submit(spend(chain, lock.outpoint(0), 1000, PayToKey(Cpt), Path.KEY, CAROL))


def test_first_submitted_wins():
    chain, op = funded()
    first = spend(chain, op, 1000, PayToKey(B), Path.KEY, ALICE)
    second = spend(chain, op, 1000, PayToKey(Cpt), Path.KEY, ALICE)
    assert chain.submit(first)
    r = chain.submit(second)
    assert not r and r.reason is RejectReason.CONFLICT
    chain.mine_block()
    assert chain.balance_of(B) == 1000 and chain.balance_of(Cpt) == 0


def test_confirmations_and_mining():
    chain = Chain()
    assert chain.mine_block() == 1 and chain.blocks == [[]]
    op = chain.faucet(A, 50)
    assert chain.confirmations(op.txid) == 0
    chain.mine_block()
    assert chain.confirmations(op.txid) == 1
    chain.mine(2)
    assert chain.confirmations(op.txid) == 3
    with pytest.raises(UnknownTransaction):
        chain.confirmations(b"\x00" * 32)


def test_dump_lists_every_transaction():
    chain, op = funded()
    chain.submit(spend(chain, op, 1000, PayToKey(B), Path.KEY, ALICE, fee=7))
    lines = chain.dump().splitlines()
    assert len(lines) == 2
    assert lines[0].endswith("height=1") and "fee=7 height=mempool" in lines[1]


def test_transaction_invariants():
    with pytest.raises(ValueError):
        TxOut(0, PayToKey(A))
    with pytest.raises(ValueError):
        ToSelfDelayed(A, B, 0)
    chain, op = funded()
    with pytest.raises(ValueError):
        Transaction((TxIn(op), TxIn(op)), (TxOut(1, PayToKey(A)),))
