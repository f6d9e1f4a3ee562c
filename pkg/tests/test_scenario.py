from fractions import Fraction

import pytest

from lngate.sim.scenario import ScenarioError, parse_amount, parse_ratio, parse_scenario


def test_full_grammar():
    sc = parse_scenario("""\
seed 7
profile wifi   # trailing comment
fees service_rate=0.05 base=1 per_sat=1/1000 onchain_open=300 onchain_close=200
timelocks to_self_delay=10 htlc_timeout=5 funding_depth=2
latency iot_link_ms=3.5
open capacity=10BTC bridge=B1
send amount=1BTC dest=D1 split=2
receive amount=50000000sat from=S1
adversary who=bridge action=broadcast_revoked state=0 share a=0.5 b=1/4
close by=iot mode=mutual
mine blocks=6
""")
    assert sc.seed == 7 and sc.profile == "wifi"
    assert sc.fees["service_rate"] == Fraction(1, 20) and sc.fees["per_sat"] == Fraction(1, 1000)
    assert sc.timelocks == dict(to_self_delay=10, htlc_timeout=5, funding_depth=2)
    assert sc.latency == {"iot_link_ms": 3.5}
    kinds = [d.kind for d in sc.flows]
    assert kinds == ["open", "send", "receive", "adversary", "close", "mine"]
    assert sc.flows[0]["capacity"] == 10**9
    assert sc.flows[1]["split"] == 2 and sc.flows[2]["amount"] == 5 * 10**7
    adv = sc.flows[3]
    assert adv["state"] == 0 and adv["share"] == {"a": Fraction(1, 2), "b": Fraction(1, 4)}
    assert adv.line == 9


def test_amounts_and_ratios():
    assert parse_amount("10BTC") == 10**9
    assert parse_amount("0.00000001btc") == 1
    assert parse_amount("123") == parse_amount("123sat") == 123
    for bad in ("1.5sat", "0.000000001BTC", "abc", "-1"):
        with pytest.raises(ValueError):
            parse_amount(bad)
    assert parse_ratio("0.1") == Fraction(1, 10) and parse_ratio("3/4") == Fraction(3, 4)
    for bad in ("1/0", "x", "-0.5"):
        with pytest.raises(ValueError):
            parse_ratio(bad)


@pytest.mark.parametrize("text, line, column, fragment", [
    ("bogus x=1", 1, 1, "unknown directive"),
    ("open capacity=10BTC bridge=B1\nsend amount=1XYZ dest=D1", 2, 13, "malformed amount"),
    ("open capacity=10BTC", 1, 1, "needs bridge="),
    ("send amount=1BTC dest=D1", 1, 1, "not opened"),
    ("open capacity=10BTC bridge=B1\nclose by=nobody mode=mutual", 2, 10, "expected one of"),
    ("open capacity=10BTC bridge=B1 colour=red", 1, 31, "unknown key"),
    ("open capacity=10BTC bridge=B1\nopen capacity=1BTC bridge=B2", 2, 1, "opens one channel"),
    ("open capacity=10BTC bridge=B1\nfees service_rate=0.1", 2, 1, "before open"),
    ("profile lora", 1, 9, "unknown profile"),
    ("open capacity=10BTC bridge=B1\nadversary who=iot action=broadcast_revoked state=1", 2, 1, "IoT"),
    ("open capacity=10BTC bridge=B1\nadversary who=bridge action=broadcast_revoked", 2, 1, "needs state="),
    ("open capacity=10BTC bridge=B1\nadversary who=bridge action=ransom", 2, 1, "only the gateway"),
    ("open capacity=10BTC bridge=B1\nadversary who=bridge action=broadcast_revoked state=1 share a=2",
     2, 63, "strictly between"),
    ("open capacity=10BTC bridge=B1\nadversary who=bridge action=broadcast_revoked state=1 share e=0.1",
     2, 61, "unknown share"),
    ("open capacity=10BTC bridge=B1\nsend amount=0 dest=D1", 2, 1, "positive"),
    ("seed x", 1, 6, "non-negative integer"),
    ("timelocks to_self_delay=0", 1, 1, "at least one block"),
])
def test_errors_carry_location(text, line, column, fragment):
    with pytest.raises(ScenarioError) as err:
        parse_scenario(text)
    e = err.value
    assert (e.line, e.column) == (line, column)
    assert fragment in e.message
    assert str(e).startswith(f"line {line}, column {column}: ")


def test_comments_and_blank_lines_are_ignored():
    sc = parse_scenario("\n# only a comment\n   \nopen capacity=1BTC bridge=B1 # why not\n")
    assert len(sc.flows) == 1 and sc.flows[0].line == 4


def test_directive_text_is_canonical():
    sc = parse_scenario("open bridge=B1 capacity=1BTC\n")
    assert sc.flows[0].text() == "open bridge=B1 capacity=100000000"
