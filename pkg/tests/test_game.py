import random
from fractions import Fraction

import pytest

from lngate.game import (
    THEOREM1_PROFILE, THEOREM2_PROFILE, Action, GameNode, GameParameters, InvalidParameters,
    PayoffVector, Player, backward_induction, build_closure_game, build_collusion_game,
    terminal, to_dot, to_text, validate_parameters,
)

import oracles

BTC = 10**8
CLOSURE_ORDER = [["bridge_first", "gateway_reacts"], ["gateway_first", "bridge_reacts"]]
COLLUSION_ORDER = [
    ["bridge_first", "gateway_reacts", "gateway_shares_loot", "bridge_shares_gain"],
    ["gateway_first", "bridge_reacts", "bridge_shares_loot", "gateway_shares_gain"],
]
HONEST = {Action.CLOSE_NORMALLY, Action.PUNISH, Action.DO_NOT_SHARE}

EXAMPLE = dict(C=10 * BTC, x=9 * BTC, y=BTC * 9 // 10, z=BTC // 10,
               x1=8 * BTC, y1=BTC * 19 // 10, z1=BTC // 10,
               x2=8 * BTC, y2=BTC * 19 // 10, z2=BTC // 10)


def agrees_with_oracle(solution, sides, order):
    for side, names in zip(sides, order):
        _, choices = oracles.spe(side)
        for name, (_, action) in zip(names, choices):
            got = solution.profile[name]
            if action is None:
                # tie: only the honest-first preference can decide
                if got not in HONEST:
                    return False
            elif got.value != action:
                return False
    return True


def test_validate_example_and_boundaries():
    assert validate_parameters(GameParameters(**EXAMPLE)) == []
    bad = dict(EXAMPLE, y1=EXAMPLE["y"], x1=EXAMPLE["x1"] + BTC)
    assert "y' > y" in validate_parameters(GameParameters(**bad))
    bad = dict(EXAMPLE, x1=EXAMPLE["x1"] - 1)
    assert validate_parameters(GameParameters(**bad)) == ["x' + y' + z' = C"]
    with pytest.raises(InvalidParameters) as err:
        build_closure_game(GameParameters(**bad))
    assert err.value.violations == ["x' + y' + z' = C"]


def test_closure_terminals():
    g = GameParameters(**EXAMPLE)
    root = build_closure_game(g)
    bridge = root.child("BridgeStarts")
    gateway = root.child("GatewayStarts")
    punish = bridge.child(Action.BROADCAST_REVOKED).child(Action.PUNISH).payoff
    assert (punish.bridge, punish.gateway) == (0, g.z1 + g.y1)
    punish = gateway.child(Action.BROADCAST_REVOKED).child(Action.PUNISH).payoff
    assert (punish.bridge, punish.gateway) == (g.y2 + g.z2, 0)
    for side in (bridge, gateway):
        honest = side.child(Action.CLOSE_NORMALLY).payoff
        assert (honest.bridge, honest.gateway, honest.iot) == (g.y, g.z, g.x)


def test_example_instance_closes_honestly():
    g = GameParameters(**EXAMPLE)
    sol = backward_induction(build_closure_game(g))
    assert sol.profile == THEOREM1_PROFILE
    assert sol.payoff == PayoffVector(g.y, g.z, g.x)
    sol = backward_induction(build_collusion_game(g))
    assert sol.profile == THEOREM2_PROFILE


def test_random_instances_match_oracle():
    rng = random.Random(2024)
    for _ in range(200):
        kw = oracles.valid_parameters(rng)
        ratios = {k: Fraction(rng.randint(1, 99), 100) for k in "abcd"}
        p = Fraction(rng.randint(0, 10), 10)
        g = GameParameters(**kw, p=p, **ratios)
        sol = backward_induction(build_closure_game(g))
        assert agrees_with_oracle(sol, oracles.closure_tree(**kw), CLOSURE_ORDER)
        assert sol.payoff == PayoffVector(g.y, g.z, g.x)
        sol = backward_induction(build_collusion_game(g))
        sides = oracles.collusion_tree(**kw, **ratios)
        assert agrees_with_oracle(sol, sides, COLLUSION_ORDER)


def test_share_splits_conserve_amounts():
    g = GameParameters(**EXAMPLE, a=Fraction(1, 3), b=Fraction(1, 3), c=Fraction(1, 3), d=Fraction(1, 3))
    root = build_collusion_game(g)
    for node in root.walk():
        if node.is_terminal and node.name != "bridge_honest" and node.name != "gateway_honest":
            p = node.payoff
            assert p.bridge + p.gateway + p.iot == g.C


def test_zero_bridge_balance_tie():
    kw = dict(C=10, x=9, y=0, z=1, x1=8, y1=1, z1=1, x2=8, y2=1, z2=1)
    sol = backward_induction(build_closure_game(GameParameters(**kw)))
    assert sol.profile["bridge_first"] is Action.CLOSE_NORMALLY
    assert sol.values["bridge_first"].bridge == 0 == sol.values["gateway_punishes"].bridge


def test_small_ratio_collapses_to_closure_game():
    g = GameParameters(**EXAMPLE, a=Fraction(1, 10**12), b=Fraction(1, 10**12),
                       c=Fraction(1, 10**12), d=Fraction(1, 10**12))
    closure = build_closure_game(g)
    collusion = build_collusion_game(g)
    pairs = [("gateway_punishes", "gateway_shares_loot_a"), ("gateway_offline", "bridge_shares_gain_b"),
             ("bridge_punishes", "bridge_shares_loot_c"), ("bridge_offline", "gateway_shares_gain_d")]
    a = {n.name: n.payoff for n in closure.walk() if n.is_terminal}
    b = {n.name: n.payoff for n in collusion.walk() if n.is_terminal}
    for x, y in pairs:
        assert a[x] == b[y]


def test_collusion_needs_open_ratios():
    with pytest.raises(InvalidParameters):
        build_collusion_game(GameParameters(**EXAMPLE, a=Fraction(1)))


def test_single_terminal_and_chance_checks():
    leaf = terminal("only", 3, 4)
    assert backward_induction(leaf).payoff == PayoffVector(3, 4)
    with pytest.raises(ValueError):
        GameNode("c", Player.CHANCE, (("l", leaf), ("r", leaf)), (Fraction(1, 3), Fraction(1, 3)))
    with pytest.raises(ValueError):
        GameNode("d", Player.BRIDGE)


def test_from_mapping():
    g = GameParameters.from_mapping(dict(EXAMPLE, p="0.25", a="1/3"))
    assert g.p == Fraction(1, 4) and g.a == Fraction(1, 3)
    with pytest.raises(ValueError):
        GameParameters.from_mapping(dict(EXAMPLE, q=1))


def test_exports():
    g = GameParameters(**EXAMPLE)
    root = build_closure_game(g)
    sol = backward_induction(root)
    text = to_text(root, sol)
    assert "bridge_first [Bridge] * CloseNormally" in text
    assert f"Punish -> gateway_punishes (0, {g.z1 + g.y1})" in text
    dot = to_dot(root, sol)
    assert dot.startswith("digraph game {") and dot.endswith("}")
    assert 'bridge_first -> bridge_honest [label="CloseNormally",style=bold];' in dot
