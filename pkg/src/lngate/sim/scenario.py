"""Line-oriented scenario language.

One directive per line, ``#`` starts a comment::

    seed 7
    profile wifi
    fees service_rate=0.1 base=0 per_sat=0 onchain_open=222 onchain_close=183
    open capacity=10BTC bridge=B1
    send amount=1BTC dest=D1 split=2
    receive amount=0.5BTC from=S1
    adversary who=bridge action=broadcast_revoked state=2 share a=0.5
    close by=iot mode=mutual
    mine blocks=6

Amounts take a ``BTC`` or ``sat`` suffix; a bare integer is satoshi.  Ratios
are decimals or ``p/q`` fractions.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Dict, List, Tuple

from ..channel import SAT_PER_BTC
from .profiles import PROFILES


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.message = message
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Directive:
    kind: str
    args: Dict[str, object]
    line: int

    def __getitem__(self, key: str):
        return self.args[key]

    def get(self, key: str, default=None):
        return self.args.get(key, default)

    def text(self) -> str:
        parts = " ".join(f"{k}={_show(v)}" for k, v in sorted(self.args.items()))
        return f"{self.kind} {parts}".strip()


def _show(v) -> str:
    if isinstance(v, dict):
        return ",".join(f"{k}:{x}" for k, x in sorted(v.items()))
    return str(v)


@dataclass
class Scenario:
    directives: List[Directive] = field(default_factory=list)
    seed: int = 0
    profile: str = "none"
    latency: Dict[str, float] = field(default_factory=dict)
    fees: Dict[str, object] = field(default_factory=dict)
    timelocks: Dict[str, int] = field(default_factory=dict)

    @property
    def flows(self) -> List[Directive]:
        return [d for d in self.directives if d.kind not in _SETTINGS]


_AMOUNT = re.compile(r"^(\d+(?:\.\d+)?)(btc|sat|sats)?$", re.IGNORECASE)


def parse_amount(text: str) -> int:
    m = _AMOUNT.match(text)
    if not m:
        raise ValueError(f"malformed amount {text!r}")
    number, unit = m.group(1), (m.group(2) or "").lower()
    if unit == "btc":
        sat = Decimal(number) * SAT_PER_BTC
        if sat != sat.to_integral_value():
            raise ValueError(f"{text} is not a whole number of satoshi")
        return int(sat)
    if "." in number:
        raise ValueError(f"fractional satoshi amount {text!r}")
    return int(number)


def parse_ratio(text: str) -> Fraction:
    try:
        if "/" in text:
            num, den = text.split("/", 1)
            value = Fraction(int(num), int(den))
        else:
            value = Fraction(Decimal(text))
    except (ValueError, ZeroDivisionError, InvalidOperation):
        raise ValueError(f"malformed ratio {text!r}") from None
    if value < 0:
        raise ValueError(f"ratio {text} must be non-negative")
    return value


def _count(text: str) -> int:
    if not re.fullmatch(r"\d+", text):
        raise ValueError(f"expected a non-negative integer, got {text!r}")
    return int(text)


def _name(text: str) -> str:
    if not re.fullmatch(r"[A-Za-z0-9_.-]+", text):
        raise ValueError(f"malformed identifier {text!r}")
    return text


def _choice(*options: str):
    def conv(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {'|'.join(options)}, got {text!r}")
        return text
    return conv


_LATENCY_KEYS = ("iot_link_ms", "iot_link_kbps", "peer_link_ms", "peer_processing_ms", "remote_leg_ms")


def _float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ValueError(f"malformed number {text!r}") from None
    if v < 0:
        raise ValueError(f"{text} must be non-negative")
    return v


# kind -> (required keys, optional keys, converters)
_GRAMMAR: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...], Dict[str, object]]] = {
    "fees": ((), ("service_rate", "base", "per_sat", "onchain_open", "onchain_close"), {
        "service_rate": parse_ratio, "base": _count, "per_sat": parse_ratio,
        "onchain_open": _count, "onchain_close": _count,
    }),
    "timelocks": ((), ("to_self_delay", "htlc_timeout", "funding_depth"), {
        "to_self_delay": _count, "htlc_timeout": _count, "funding_depth": _count,
    }),
    "latency": ((), _LATENCY_KEYS, {k: _float for k in _LATENCY_KEYS}),
    "open": (("capacity", "bridge"), ("funds", "liquidity"), {
        "capacity": parse_amount, "bridge": _name, "funds": parse_amount, "liquidity": parse_amount,
    }),
    "send": (("amount", "dest"), ("split",), {"amount": parse_amount, "dest": _name, "split": _count}),
    "receive": (("amount", "from"), (), {"amount": parse_amount, "from": _name}),
    "close": (("by", "mode"), (), {
        "by": _choice("iot", "gateway", "bridge"), "mode": _choice("mutual", "unilateral"),
    }),
    "mine": (("blocks",), (), {"blocks": _count}),
    "adversary": (("who", "action"), ("state",), {
        "who": _choice("bridge", "gateway", "iot"),
        "action": _choice("broadcast_revoked", "offline", "ransom"),
        "state": _count,
    }),
}
_SETTINGS = {"seed", "profile", "fees", "timelocks", "latency"}
_SHARE_KEYS = ("a", "b", "c", "d")


def _tokens(line: str) -> List[Tuple[str, int]]:
    return [(m.group(0), m.start() + 1) for m in re.finditer(r"\S+", line)]


def parse_scenario(text: str) -> Scenario:
    sc = Scenario()
    opened = False
    flows_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        toks = _tokens(line)
        if not toks:
            continue
        (kind, col) = toks[0]
        rest = toks[1:]

        def fail(msg: str, column: int = col):
            raise ScenarioError(msg, lineno, column)

        if kind == "seed":
            if len(rest) != 1:
                fail("seed takes one integer")
            try:
                sc.seed = _count(rest[0][0])
            except ValueError as exc:
                fail(str(exc), rest[0][1])
            continue
        if kind == "profile":
            if len(rest) != 1:
                fail("profile takes one name")
            if rest[0][0] not in PROFILES:
                fail(f"unknown profile {rest[0][0]!r}", rest[0][1])
            if flows_seen:
                fail("profile must come before any flow")
            sc.profile = rest[0][0]
            continue
        if kind not in _GRAMMAR:
            fail(f"unknown directive {kind!r}")
        required, optional, conv = _GRAMMAR[kind]
        args: Dict[str, object] = {}
        share: Dict[str, Fraction] = {}
        in_share = False
        for tok, tcol in rest:
            if kind == "adversary" and tok == "share":
                if in_share:
                    fail("share given twice", tcol)
                in_share = True
                continue
            if "=" not in tok:
                fail(f"expected key=value, got {tok!r}", tcol)
            key, value = tok.split("=", 1)
            if in_share:
                if key not in _SHARE_KEYS:
                    fail(f"unknown share ratio {key!r}", tcol)
                try:
                    r = parse_ratio(value)
                except ValueError as exc:
                    fail(str(exc), tcol + len(key) + 1)
                if not 0 < r < 1:
                    fail(f"share ratio {key} must lie strictly between 0 and 1", tcol + len(key) + 1)
                share[key] = r
                continue
            if key not in required and key not in optional:
                fail(f"unknown key {key!r} for {kind}", tcol)
            if key in args:
                fail(f"duplicate key {key!r}", tcol)
            try:
                args[key] = conv[key](value)
            except ValueError as exc:
                fail(str(exc), tcol + len(key) + 1)
        for key in required:
            if key not in args:
                fail(f"{kind} needs {key}=")
        if in_share and not share:
            fail("share needs at least one ratio")
        if share:
            args["share"] = share

        # cross-directive checks
        if kind == "timelocks" and 0 in args.values():
            fail("timelocks must be at least one block")
        if kind in ("fees", "timelocks", "latency"):
            if opened:
                fail(f"{kind} must come before open")
            target = {"fees": sc.fees, "timelocks": sc.timelocks, "latency": sc.latency}[kind]
            target.update(args)
            sc.directives.append(Directive(kind, args, lineno))
            continue
        if kind == "open":
            if opened:
                fail("a scenario opens one channel")
            if args["capacity"] <= 0:
                fail("capacity must be positive")
            opened = True
        elif kind in ("send", "receive", "close") or (
            kind == "adversary" and args["action"] == "broadcast_revoked"
        ):
            if not opened:
                fail(f"{kind} refers to a channel that is not opened yet")
        if kind in ("send", "receive") and args["amount"] <= 0:
            fail("amount must be positive")
        if kind == "send" and args.get("split", 1) < 1:
            fail("split must be at least 1")
        if kind == "adversary":
            act, who = args["action"], args["who"]
            if act == "broadcast_revoked":
                if who == "iot":
                    fail("the IoT device holds no commitment to broadcast")
                if "state" not in args:
                    fail("broadcast_revoked needs state=")
            elif "state" in args:
                fail("state= only applies to broadcast_revoked")
            if act == "ransom" and who != "gateway":
                fail("only the gateway can hold funds to ransom")
            if share and act != "broadcast_revoked":
                fail("share only applies to broadcast_revoked")
        flows_seen = True
        sc.directives.append(Directive(kind, args, lineno))
    return sc


def load_scenario(path: str) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())
