"""Frozen step orders for each flow, written out by hand.

Labels: ``"<message> <from>><to>"`` for messages between the device (iot),
gateway (gw) and bridge (br); bare names for threshold operations and local
steps.
"""

OPEN = [
    "OpenChannelRequest iot>gw",
    "tkeygen",
    "open_channel gw>br",
    "accept_channel br>gw",
    "build_funding_tx",
    "derive_child",
    "build_commitment_tx",
    "tsign",
    "funding_created gw>br",
    "funding_signed br>gw",
    "broadcast_funding",
    "funding_depth_reached",
    "funding_locked gw>br",
    "funding_locked br>gw",
]

_HTLC_OUT = [
    "add_htlc",
    "update_add_htlc gw>br",
    "tsign",
    "commitment_signed gw>br",
    "revoke_and_ack br>gw",
    "commitment_signed br>gw",
    "derive_child",
    "revoke_and_ack gw>br",
    "update_fulfill_htlc br>gw",
    "commitment_signed br>gw",
    "derive_child",
    "revoke_and_ack gw>br",
    "tsign",
    "commitment_signed gw>br",
    "revoke_and_ack br>gw",
]

SEND = ["SendPayment iot>gw"] + _HTLC_OUT + ["PaymentSendSuccess gw>iot"]
SEND_SPLIT2 = ["SendPayment iot>gw"] + _HTLC_OUT + _HTLC_OUT + ["PaymentSendSuccess gw>iot"]

RECEIVE = [
    "update_add_htlc br>gw",
    "commitment_signed br>gw",
    "derive_child",
    "revoke_and_ack gw>br",
    "tsign",
    "commitment_signed gw>br",
    "revoke_and_ack br>gw",
    "update_fulfill_htlc gw>br",
    "tsign",
    "commitment_signed gw>br",
    "revoke_and_ack br>gw",
    "commitment_signed br>gw",
    "derive_child",
    "revoke_and_ack gw>br",
    "PaymentReceiveSuccess gw>iot",
]

_NEGOTIATE = [
    "tsign",
    "closing_signed gw>br",
    "closing_signed br>gw",
    "tsign",
    "closing_signed gw>br",
    "closing_signed br>gw",
    "broadcast_closing",
]

CLOSE = {
    "iot": ["ChannelClosingRequest iot>gw", "shutdown gw>br", "shutdown br>gw"] + _NEGOTIATE,
    "gateway": ["ChannelClosingRequest gw>iot", "shutdown gw>br", "shutdown br>gw"] + _NEGOTIATE,
    "bridge": ["shutdown br>gw", "shutdown gw>br"] + _NEGOTIATE,
}

COUNTS = {
    "open": {"tkeygen": 1, "derive_child": 1, "tsign": 1},
    "send": {"tkeygen": 0, "derive_child": 2, "tsign": 2},
    "receive": {"tkeygen": 0, "derive_child": 2, "tsign": 2},
}
