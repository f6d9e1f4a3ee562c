"""Scenarios run by ``lngate-sim check``, with the flow outcomes each must produce."""

from __future__ import annotations

from typing import Dict, List, Tuple

_PAY = """\
open capacity=10BTC bridge=B1
send amount=1BTC dest=D1
receive amount=0.5BTC from=S1
"""

# name -> (scenario text, expected status of each flow in order)
BUILTIN: Dict[str, Tuple[str, List[str]]] = {
    "happy_path": (
        _PAY + "close by=iot mode=mutual\n",
        ["ok", "ok", "ok", "ok"],
    ),
    "split_send_gateway_close": (
        "open capacity=10BTC bridge=B1\nsend amount=1BTC dest=D1 split=2\nclose by=gateway mode=mutual\n",
        ["ok", "ok", "ok"],
    ),
    "bridge_close": (
        _PAY + "close by=bridge mode=mutual\n",
        ["ok", "ok", "ok", "ok"],
    ),
    "bridge_unilateral": (
        "open capacity=10BTC bridge=B1\nsend amount=1BTC dest=D1\nclose by=bridge mode=unilateral\nmine blocks=2\n",
        ["ok", "ok", "ok", "ok"],
    ),
    "bridge_cheats": (
        _PAY + "adversary who=bridge action=broadcast_revoked state=2\n",
        ["ok", "ok", "ok", "ok"],
    ),
    "gateway_cheats": (
        _PAY + "adversary who=gateway action=broadcast_revoked state=2\n",
        ["ok", "ok", "ok", "ok"],
    ),
    "gateway_offline_bridge_shares": (
        _PAY + "adversary who=gateway action=offline\n"
        "adversary who=bridge action=broadcast_revoked state=2 share b=1/4\n",
        ["ok", "ok", "ok", "ok", "ok"],
    ),
    "gateway_punishes_and_shares": (
        _PAY + "adversary who=bridge action=broadcast_revoked state=2 share a=0.3\n",
        ["ok", "ok", "ok", "ok"],
    ),
    "ransom": (
        "open capacity=10BTC bridge=B1\nadversary who=gateway action=ransom\n"
        "send amount=1BTC dest=D1\n",
        ["ok", "ok", "aborted"],
    ),
    "iot_offline": (
        _PAY + "adversary who=iot action=offline\nreceive amount=0.1BTC from=S1\nclose by=bridge mode=mutual\n",
        ["ok", "ok", "ok", "ok", "aborted", "aborted"],
    ),
}
