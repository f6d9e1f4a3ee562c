import pytest

from lngate.crypto import base_mul, ecdsa_sign, hash_digest
from lngate.protocol import flows
from lngate.protocol.messages import (
    CONTROL_FRAME, ChannelClosingRequest, ClosingSigned, CommitmentSigned, ControlCodec,
    FramingError, OpenChannel, OpenChannelRequest, PaymentReceiveSuccess, RevokeAndAck,
    SendPayment, UpdateAddHtlc, decode_peer, encode_peer, node_id, parse_routed_payload,
    peer_message_types, routed_payload,
)
from lngate.sim.runner import check_gating, run_scenario
from lngate.sim.scenario import parse_scenario

import golden

PAY = """\
open capacity=10BTC bridge=B1
send amount=1BTC dest=D1
receive amount=0.5BTC from=S1
"""


def run(text, profile=None):
    return run_scenario(parse_scenario(text), profile=profile)


@pytest.fixture(scope="module")
def happy():
    return run(PAY + "close by=iot mode=mutual\n")


def test_package_step_tables_match_frozen_copies():
    assert list(flows.OPEN_STEPS) == golden.OPEN
    assert flows.send_steps(1) == golden.SEND
    assert flows.send_steps(2) == golden.SEND_SPLIT2
    assert list(flows.RECEIVE_STEPS) == golden.RECEIVE
    for by, want in golden.CLOSE.items():
        assert flows.mutual_close_steps(by) == want
    assert flows.THRESHOLD_COUNTS == golden.COUNTS


def test_happy_path_trace_projection(happy):
    assert happy.violations == []
    kinds = [r.kind for r in happy.records]
    assert kinds == ["open", "send", "receive", "close"]
    want = [golden.OPEN, golden.SEND, golden.RECEIVE, golden.CLOSE["iot"]]
    for rec, steps in zip(happy.records, want):
        assert rec.status == "ok"
        assert flows.project(happy.events, rec.flow) == steps


@pytest.mark.parametrize("by", ["gateway", "bridge"])
def test_close_initiators(by):
    r = run(PAY + f"close by={by} mode=mutual\n")
    close = r.flows_of("close")[0]
    assert close.status == "ok" and r.violations == []
    assert flows.project(r.events, close.flow) == golden.CLOSE[by]


def test_split_payment_uses_four_signatures():
    r = run("open capacity=10BTC bridge=B1\nsend amount=1BTC dest=D1 split=2\n")
    send = r.flows_of("send")[0]
    assert flows.project(r.events, send.flow) == golden.SEND_SPLIT2
    rep = r.report()["flows"][1]
    assert (rep["tsign"], rep["derive_child"]) == (4, 4)


def test_gating_holds_on_real_trace(happy):
    assert check_gating(happy.events, ["gateway"]) == []


def test_gating_detects_missing_signature(happy):
    # drop every completed tsign: each gated gateway message becomes a violation
    pruned = [e for e in happy.events
              if not (e.kind == "threshold" and e.detail.get("op") == "tsign")]
    problems = check_gating(pruned, ["gateway"])
    gated = [e for e in happy.events if e.actor == "gateway" and e.kind == "send"
             and e.detail.get("msg") in ("commitment_signed", "closing_signed", "funding_created")]
    assert len(problems) == len(gated) > 0


def test_gateway_signature_precedes_each_commitment(happy):
    last_sign = None
    for e in happy.events:
        if e.actor != "gateway":
            continue
        if e.kind == "threshold" and e.detail.get("op") == "tsign" and e.detail.get("status") == "complete":
            last_sign = e.detail["digest"]
        if e.kind == "send" and e.detail.get("msg") == "commitment_signed":
            assert e.detail["digest"] == last_sign


def test_service_fee_only_on_sends(happy):
    rep = happy.report()
    fees = {f["kind"]: f["service_fee"] for f in rep["flows"]}
    assert fees["send"] == 10**7 and fees["receive"] == 0


def test_aborted_receive_leaves_last_settled_state():
    r = run(PAY + "adversary who=iot action=offline\nreceive amount=0.1BTC from=S1\n")
    assert [x.status for x in r.records][-1] == "aborted"
    before, after = r.snapshots[-3], r.snapshots[-1]
    for role in ("gateway", "bridge"):
        b, a = before["channels"][role], after["channels"][role]
        assert (a["x"], a["y"], a["z"], a["in_flight"]) == (b["x"], b["y"], b["z"], 0)
    assert r.violations == []


def test_ransom_freezes_funds_without_moving_them():
    r = run("open capacity=10BTC bridge=B1\nadversary who=gateway action=ransom\nsend amount=1BTC dest=D1\n")
    assert [x.status for x in r.records] == ["ok", "ok", "aborted"]
    ch = r.snapshots[-1]["channels"]["gateway"]
    assert ch["x"] == 10**9 and r.world.remote_nodes["D1"].balance == 0


def test_control_codec_round_trip_and_tamper():
    key = b"k" * 32
    a, b = ControlCodec(key, 0), ControlCodec(key, 0)
    msgs = [OpenChannelRequest(10**9, node_id("B1")), SendPayment(5, node_id("D1"), 2),
            ChannelClosingRequest(True), PaymentReceiveSuccess(7)]
    for m in msgs:
        frame = a.seal(m)
        assert len(frame) == CONTROL_FRAME == 57
        assert b.open(frame) == m
    frame = a.seal(msgs[0])
    bad = frame[:5] + bytes([frame[5] ^ 1]) + frame[6:]
    with pytest.raises(FramingError):
        b.open(bad)
    with pytest.raises(FramingError):
        b.open(frame[:-1])
    b.open(frame)
    with pytest.raises(FramingError):
        b.open(frame)  # replay


def test_peer_message_round_trip():
    sig = ecdsa_sign(5, hash_digest(b"x"), 9)
    cid = b"\x01" * 32
    msgs = [
        OpenChannel(cid, 1, capacity=10, funding_pubkey=base_mul(3), to_self_delay=144),
        UpdateAddHtlc(cid, 2, htlc_id=0, amount=9, payment_hash=b"\x02" * 32, expiry=40,
                      routed_payload=routed_payload(node_id("D1"), 9, b"\x02" * 32), service_fee=1),
        CommitmentSigned(cid, 3, signature=sig, htlc_signatures=(sig, sig)),
        RevokeAndAck(cid, 4, per_commitment_secret=12345, next_per_commitment_point=base_mul(8)),
        ClosingSigned(cid, 5, fee_offer=183, signature=sig),
    ]
    for m in msgs:
        assert decode_peer(encode_peer(m)) == m
    with pytest.raises(FramingError):
        decode_peer(encode_peer(msgs[0])[:-1])
    assert parse_routed_payload(msgs[1].routed_payload) == (node_id("D1"), 9, b"\x02" * 32)
    assert {"open_channel", "revoke_and_ack", "closing_signed", "shutdown"} <= set(peer_message_types())
