"""Expected step order of each flow and the trace projection it is checked against.

A trace projects onto labels of three sorts: protocol messages as
``"<type> <from>><to>"``, completed threshold operations (``tkeygen``,
``tsign``, ``derive_child``), and local steps such as ``build_funding_tx``.
Threshold round frames themselves are not part of the projection.
"""

from __future__ import annotations

from typing import Iterable, List, Optional, Sequence

_ROLE = {"iot": "iot", "gateway": "gw", "bridge": "br"}


def role_of(endpoint: str) -> str:
    return _ROLE.get(endpoint.split("-")[0], endpoint)


OPEN_STEPS = (
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
)

_SEND_HTLC = (
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
)


def send_steps(parts: int = 1) -> List[str]:
    return ["SendPayment iot>gw", *(_SEND_HTLC * parts), "PaymentSendSuccess gw>iot"]


SEND_STEPS = tuple(send_steps(1))

RECEIVE_STEPS = (
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
)

_NEGOTIATION = (
    "tsign",
    "closing_signed gw>br",
    "closing_signed br>gw",
    "tsign",
    "closing_signed gw>br",
    "closing_signed br>gw",
    "broadcast_closing",
)


def mutual_close_steps(by: str) -> List[str]:
    if by == "iot":
        head = ["ChannelClosingRequest iot>gw", "shutdown gw>br", "shutdown br>gw"]
    elif by == "gateway":
        head = ["ChannelClosingRequest gw>iot", "shutdown gw>br", "shutdown br>gw"]
    elif by == "bridge":
        head = ["shutdown br>gw", "shutdown gw>br"]
    else:
        raise ValueError(by)
    return head + list(_NEGOTIATION)


THRESHOLD_COUNTS = {
    "open": {"tkeygen": 1, "derive_child": 1, "tsign": 1},
    "send": {"tkeygen": 0, "derive_child": 2, "tsign": 2},
    "receive": {"tkeygen": 0, "derive_child": 2, "tsign": 2},
}


def project(events: Iterable, flow: Optional[int] = None) -> List[str]:
    """Labels of ``events`` (optionally one flow) in trace order."""
    out: List[str] = []
    for ev in events:
        if flow is not None and ev.flow != flow:
            continue
        d = ev.detail
        if ev.kind == "send" and d.get("msg") != "ThresholdFrame":
            out.append(f"{d['msg']} {role_of(ev.actor)}>{role_of(d['to'])}")
        elif ev.kind == "threshold" and d.get("status") == "complete":
            out.append(d["op"])
        elif ev.kind == "step" and d.get("step") in _LOCAL_STEPS:
            out.append(d["step"])
    return out


_LOCAL_STEPS = {
    "add_htlc", "build_funding_tx", "build_commitment_tx", "broadcast_funding",
    "funding_depth_reached", "broadcast_closing",
}


def first_mismatch(got: Sequence[str], want: Sequence[str]) -> Optional[int]:
    for i, (a, b) in enumerate(zip(got, want)):
        if a != b:
            return i
    if len(got) != len(want):
        return min(len(got), len(want))
    return None
