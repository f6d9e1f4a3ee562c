"""Closure and collusion games between the bridge node and the gateway.

Payoffs are integer satoshi.  Sharing ratios are applied as
``floor(ratio * amount)`` so every split conserves the amount being split.
Expected values at chance nodes are exact fractions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterator, List, Optional, Tuple, Union

Number = Union[int, Fraction]


class Player(enum.Enum):
    BRIDGE = "Bridge"
    GATEWAY = "Gateway"
    CHANCE = "Chance"


class Action(enum.Enum):
    CLOSE_NORMALLY = "CloseNormally"
    BROADCAST_REVOKED = "BroadcastRevoked"
    PUNISH = "Punish"
    OFFLINE = "Offline"
    SHARE = "Share"
    DO_NOT_SHARE = "DoNotShare"


# honest actions first: this order is the tie-break
_PREFERENCE = [
    Action.CLOSE_NORMALLY, Action.PUNISH, Action.DO_NOT_SHARE,
    Action.BROADCAST_REVOKED, Action.OFFLINE, Action.SHARE,
]


class InvalidParameters(ValueError):
    def __init__(self, violations: List[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class PayoffVector:
    bridge: Number
    gateway: Number
    iot: Number = 0

    def of(self, player: Player) -> Number:
        if player is Player.BRIDGE:
            return self.bridge
        if player is Player.GATEWAY:
            return self.gateway
        raise ValueError("chance has no payoff")

    def scaled(self, w: Fraction) -> "PayoffVector":
        return PayoffVector(self.bridge * w, self.gateway * w, self.iot * w)

    def __add__(self, other: "PayoffVector") -> "PayoffVector":
        return PayoffVector(
            self.bridge + other.bridge, self.gateway + other.gateway, self.iot + other.iot
        )

    def __str__(self) -> str:
        return f"(bridge={self.bridge}, gateway={self.gateway}, iot={self.iot})"


@dataclass(frozen=True)
class GameNode:
    name: str
    player: Optional[Player] = None  # None for a terminal
    actions: Tuple[Tuple[str, "GameNode"], ...] = ()
    probabilities: Tuple[Fraction, ...] = ()
    payoff: Optional[PayoffVector] = None

    def __post_init__(self):
        if self.player is None:
            if self.payoff is None or self.actions:
                raise ValueError(f"terminal {self.name} needs a payoff and no actions")
        else:
            if not self.actions:
                raise ValueError(f"decision node {self.name} has no actions")
            if self.player is Player.CHANCE:
                if len(self.probabilities) != len(self.actions) or sum(self.probabilities) != 1:
                    raise ValueError(f"chance node {self.name}: probabilities must sum to 1")

    @property
    def is_terminal(self) -> bool:
        return self.player is None

    def child(self, label: Union[str, Action]) -> "GameNode":
        key = label.value if isinstance(label, Action) else label
        for lbl, node in self.actions:
            if lbl == key:
                return node
        raise KeyError(key)

    def walk(self) -> Iterator["GameNode"]:
        yield self
        for _, node in self.actions:
            yield from node.walk()


def terminal(name: str, bridge: Number, gateway: Number, iot: Number = 0) -> GameNode:
    return GameNode(name, payoff=PayoffVector(bridge, gateway, iot))


def decision(name: str, player: Player, *branches: Tuple[Action, GameNode]) -> GameNode:
    return GameNode(name, player, tuple((a.value, n) for a, n in branches))


@dataclass(frozen=True)
class GameParameters:
    C: int
    x: int
    y: int
    z: int
    x1: int  # bridge-favourable revoked state (x', y', z')
    y1: int
    z1: int
    x2: int  # revoked state the gateway would broadcast (x'', y'', z'')
    y2: int
    z2: int
    p: Fraction = Fraction(1, 2)
    a: Fraction = Fraction(1, 2)
    b: Fraction = Fraction(1, 2)
    c: Fraction = Fraction(1, 2)
    d: Fraction = Fraction(1, 2)

    @classmethod
    def from_mapping(cls, data: dict) -> "GameParameters":
        ints = ("C", "x", "y", "z", "x1", "y1", "z1", "x2", "y2", "z2")
        fracs = ("p", "a", "b", "c", "d")
        unknown = set(data) - set(ints) - set(fracs)
        if unknown:
            raise ValueError(f"unknown game parameters: {sorted(unknown)}")
        kw = {k: int(data[k]) for k in ints}
        kw.update({k: Fraction(str(data[k])) for k in fracs if k in data})
        return cls(**kw)


def validate_parameters(g: GameParameters) -> List[str]:
    """Each constraint checked on its own; returns the failing ones by name."""
    v = []
    checks = [
        (g.x + g.y + g.z == g.C, "x + y + z = C"),
        (g.x1 + g.y1 + g.z1 == g.C, "x' + y' + z' = C"),
        (g.y1 > g.y, "y' > y"),
        (g.z1 <= g.z, "z' <= z"),
        (g.x1 < g.x, "x' < x"),
        (g.x2 + g.y2 + g.z2 == g.C, "x'' + y'' + z'' = C"),
        (g.y2 > g.y, "y'' > y"),
        (g.z2 <= g.z, "z'' <= z"),
        (g.x2 < g.x, "x'' < x"),
        (0 <= g.p <= 1, "0 <= p <= 1"),
    ]
    for ok, label in checks:
        if not ok:
            v.append(label)
    for name in ("x", "y", "z", "x1", "y1", "z1", "x2", "y2", "z2"):
        if getattr(g, name) < 0:
            v.append(f"{name} >= 0")
    return v


def _require_valid(g: GameParameters, ratios: bool = False) -> None:
    v = validate_parameters(g)
    if ratios:
        for r in ("a", "b", "c", "d"):
            if not 0 < getattr(g, r) < 1:
                v.append(f"0 < {r} < 1")
    if v:
        raise InvalidParameters(v)


def _split(amount: int, ratio: Fraction) -> Tuple[int, int]:
    """(kept, given) with given = floor(ratio * amount)."""
    given = int(ratio * amount)
    return amount - given, given


def _chance_root(g: GameParameters, bridge_sub: GameNode, gateway_sub: GameNode) -> GameNode:
    return GameNode(
        "start", Player.CHANCE,
        (("BridgeStarts", bridge_sub), ("GatewayStarts", gateway_sub)),
        (g.p, 1 - g.p),
    )


def build_closure_game(g: GameParameters) -> GameNode:
    _require_valid(g)
    bridge_sub = decision(
        "bridge_first", Player.BRIDGE,
        (Action.CLOSE_NORMALLY, terminal("bridge_honest", g.y, g.z, g.x)),
        (Action.BROADCAST_REVOKED, decision(
            "gateway_reacts", Player.GATEWAY,
            (Action.PUNISH, terminal("gateway_punishes", 0, g.z1 + g.y1, g.x1)),
            (Action.OFFLINE, terminal("gateway_offline", g.y1, g.z1, g.x1)),
        )),
    )
    gateway_sub = decision(
        "gateway_first", Player.GATEWAY,
        (Action.CLOSE_NORMALLY, terminal("gateway_honest", g.y, g.z, g.x)),
        (Action.BROADCAST_REVOKED, decision(
            "bridge_reacts", Player.BRIDGE,
            (Action.PUNISH, terminal("bridge_punishes", g.y2 + g.z2, 0, g.x2)),
            (Action.OFFLINE, terminal("bridge_offline", g.y2, g.z2, g.x2)),
        )),
    )
    return _chance_root(g, bridge_sub, gateway_sub)


def build_collusion_game(g: GameParameters) -> GameNode:
    _require_valid(g, ratios=True)

    gw_keep, br_gets = _split(g.z1 + g.y1, g.a)
    gateway_share_after_punish = decision(
        "gateway_shares_loot", Player.GATEWAY,
        (Action.DO_NOT_SHARE, terminal("gateway_keeps_loot", 0, g.z1 + g.y1, g.x1)),
        (Action.SHARE, terminal("gateway_shares_loot_a", br_gets, gw_keep, g.x1)),
    )
    br_keep, gw_gets = _split(g.y1, g.b)
    bridge_share_after_offline = decision(
        "bridge_shares_gain", Player.BRIDGE,
        (Action.DO_NOT_SHARE, terminal("bridge_keeps_gain", g.y1, g.z1, g.x1)),
        (Action.SHARE, terminal("bridge_shares_gain_b", br_keep, g.z1 + gw_gets, g.x1)),
    )
    br_keep2, gw_gets2 = _split(g.y2 + g.z2, g.c)
    bridge_share_after_punish = decision(
        "bridge_shares_loot", Player.BRIDGE,
        (Action.DO_NOT_SHARE, terminal("bridge_keeps_loot", g.y2 + g.z2, 0, g.x2)),
        (Action.SHARE, terminal("bridge_shares_loot_c", br_keep2, gw_gets2, g.x2)),
    )
    gw_keep2, br_gets2 = _split(g.z2, g.d)
    gateway_share_after_offline = decision(
        "gateway_shares_gain", Player.GATEWAY,
        (Action.DO_NOT_SHARE, terminal("gateway_keeps_gain", g.y2, g.z2, g.x2)),
        (Action.SHARE, terminal("gateway_shares_gain_d", g.y2 + br_gets2, gw_keep2, g.x2)),
    )
    bridge_sub = decision(
        "bridge_first", Player.BRIDGE,
        (Action.CLOSE_NORMALLY, terminal("bridge_honest", g.y, g.z, g.x)),
        (Action.BROADCAST_REVOKED, decision(
            "gateway_reacts", Player.GATEWAY,
            (Action.PUNISH, gateway_share_after_punish),
            (Action.OFFLINE, bridge_share_after_offline),
        )),
    )
    gateway_sub = decision(
        "gateway_first", Player.GATEWAY,
        (Action.CLOSE_NORMALLY, terminal("gateway_honest", g.y, g.z, g.x)),
        (Action.BROADCAST_REVOKED, decision(
            "bridge_reacts", Player.BRIDGE,
            (Action.PUNISH, bridge_share_after_punish),
            (Action.OFFLINE, gateway_share_after_offline),
        )),
    )
    return _chance_root(g, bridge_sub, gateway_sub)


@dataclass
class Solution:
    profile: Dict[str, Action] = field(default_factory=dict)
    values: Dict[str, PayoffVector] = field(default_factory=dict)
    payoff: Optional[PayoffVector] = None


def _rank(label: str) -> int:
    try:
        return _PREFERENCE.index(Action(label))
    except ValueError:
        return len(_PREFERENCE)


def backward_induction(root: GameNode) -> Solution:
    """Solve from the leaves up; ties go to the honest action."""
    sol = Solution()

    def solve(node: GameNode) -> PayoffVector:
        if node.is_terminal:
            value = node.payoff
        elif node.player is Player.CHANCE:
            value = PayoffVector(0, 0, 0)
            for prob, (_, child) in zip(node.probabilities, node.actions):
                value = value + solve(child).scaled(Fraction(prob))
        else:
            best_label, best = None, None
            ordered = sorted(node.actions, key=lambda a: _rank(a[0]))
            results = {label: solve(child) for label, child in node.actions}
            for label, _ in ordered:
                v = results[label]
                if best is None or v.of(node.player) > best.of(node.player):
                    best_label, best = label, v
            sol.profile[node.name] = Action(best_label)
            value = best
        sol.values[node.name] = value
        return value

    sol.payoff = solve(root)
    return sol


THEOREM1_PROFILE = {
    "bridge_first": Action.CLOSE_NORMALLY,
    "gateway_reacts": Action.PUNISH,
    "gateway_first": Action.CLOSE_NORMALLY,
    "bridge_reacts": Action.PUNISH,
}

THEOREM2_PROFILE = dict(
    THEOREM1_PROFILE,
    gateway_shares_loot=Action.DO_NOT_SHARE,
    bridge_shares_gain=Action.DO_NOT_SHARE,
    bridge_shares_loot=Action.DO_NOT_SHARE,
    gateway_shares_gain=Action.DO_NOT_SHARE,
)


# --- export --------------------------------------------------------------------------------


def _fmt(v: Number) -> str:
    return str(v) if not isinstance(v, Fraction) or v.denominator != 1 else str(v.numerator)


def to_text(root: GameNode, solution: Optional[Solution] = None) -> str:
    lines: List[str] = []

    def rec(node: GameNode, label: str, depth: int) -> None:
        pad = "  " * depth
        head = f"{pad}{label + ' -> ' if label else ''}{node.name}"
        if node.is_terminal:
            p = node.payoff
            lines.append(f"{head} ({_fmt(p.bridge)}, {_fmt(p.gateway)}) iot={_fmt(p.iot)}")
            return
        chosen = ""
        if solution and node.name in solution.profile:
            chosen = f" * {solution.profile[node.name].value}"
        lines.append(f"{head} [{node.player.value}]{chosen}")
        for i, (lbl, child) in enumerate(node.actions):
            if node.player is Player.CHANCE:
                lbl = f"{lbl} p={node.probabilities[i]}"
            rec(child, lbl, depth + 1)

    rec(root, "", 0)
    return "\n".join(lines)


def to_dot(root: GameNode, solution: Optional[Solution] = None) -> str:
    lines = ["digraph game {", "  node [fontname=Helvetica];"]
    for node in root.walk():
        if node.is_terminal:
            p = node.payoff
            lines.append(
                f'  {node.name} [shape=box,label="({_fmt(p.bridge)}, {_fmt(p.gateway)})"];'
            )
        else:
            shape = "diamond" if node.player is Player.CHANCE else "ellipse"
            lines.append(f'  {node.name} [shape={shape},label="{node.player.value}"];')
        for i, (lbl, child) in enumerate(node.actions):
            bold = (
                solution is not None
                and solution.profile.get(node.name) is not None
                and solution.profile[node.name].value == lbl
            )
            text = f"{lbl} ({node.probabilities[i]})" if node.player is Player.CHANCE else lbl
            style = ",style=bold" if bold else ""
            lines.append(f'  {node.name} -> {child.name} [label="{text}"{style}];')
    lines.append("}")
    return "\n".join(lines)
