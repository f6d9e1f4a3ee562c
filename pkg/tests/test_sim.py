import json

import pytest

from lngate.sim.builtin import BUILTIN
from lngate.sim.profiles import PROFILES, get_profile, with_overrides
from lngate.sim.runner import run_scalability, run_scenario
from lngate.sim.scenario import parse_scenario

BTC = 10**8
PAY = "open capacity=10BTC bridge=B1\nsend amount=1BTC dest=D1\nreceive amount=0.5BTC from=S1\n"


def run(text, profile=None, seed=None):
    return run_scenario(parse_scenario(text), profile=profile, seed=seed)


def test_zero_delay_profile_isolates_logic():
    r = run("open capacity=10BTC bridge=B1\nsend amount=1BTC dest=D1\n", profile="none")
    send = r.report()["flows"][1]
    assert send["duration_ms"] == 0 and send["tsign"] == 2 and send["derive_child"] == 2
    assert send["implied_kbps"] is None


def test_balances_after_example_flows():
    r = run(PAY + "close by=iot mode=mutual\n")
    ch = r.snapshots[-2]["channels"]["gateway"]
    assert (ch["x"], ch["y"], ch["z"]) == (95 * BTC // 10, 4 * BTC // 10, BTC // 10)
    held = r.snapshots[-1]["held"]
    assert held["iot"] == 95 * BTC // 10 - 183
    assert held["bridge"] == 4 * BTC // 10 and held["gateway"] == BTC // 10
    assert r.world.remote_nodes["D1"].balance == 9 * BTC // 10


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_builtin_scenarios(name):
    text, statuses = BUILTIN[name]
    r = run(text)
    assert [x.status for x in r.records] == statuses
    assert r.violations == []


def test_value_snapshots_balance_every_directive():
    r = run(PAY + "close by=bridge mode=unilateral\nmine blocks=150\n")
    assert len(r.snapshots) == 1 + 5
    for snap in r.snapshots:
        assert snap["total"] == snap["expected"]
    assert r.violations == []


def test_game_cross_check_recorded():
    r = run(PAY + "adversary who=bridge action=broadcast_revoked state=2 share a=0.3\n")
    game = r.records[-1].detail["game"]
    assert game["checked"] and game["match"]
    assert game["terminal"] == "gateway_shares_loot_a"
    assert game["spe"]["gateway_shares_loot"] == "DoNotShare"


def test_reports_are_json_with_sorted_keys():
    r = run(PAY)
    rep = json.loads(r.report_json())
    assert rep["totals"]["onchain_fees"] == {"funding": 222}
    assert rep["profile"]["name"] == "none"
    assert r.report_json() == json.dumps(rep, sort_keys=True, indent=1)
    lines = r.trace_text().splitlines()
    assert len(lines) == len(r.events)


def test_seed_changes_trace():
    a = run(PAY, seed=1).trace_json()
    b = run(PAY, seed=2).trace_json()
    assert a != b


def test_latency_override_from_scenario():
    r = run("latency iot_link_ms=1\nopen capacity=10BTC bridge=B1\nsend amount=1BTC dest=D1\n")
    assert r.world.profile.iot_link_ms == 1
    assert r.report()["flows"][1]["duration_ms"] > 0


def test_profiles():
    assert set(PROFILES) == {"none", "wifi", "ble", "noiot"}
    assert get_profile("wifi").fitted and not get_profile("none").fitted
    with pytest.raises(KeyError):
        get_profile("lora")
    with pytest.raises(ValueError):
        with_overrides(get_profile("wifi"), iot_link_ms=-1)
    ble = get_profile("ble")
    assert ble.transmit_ms(230 * 1000 // 8) == pytest.approx(1000)
    assert ble.threshold_ms("tsign", device_side=True) == 83


def test_scalability_trend_under_wifi():
    means = []
    for n in range(1, 6):
        r = run_scalability(n, 3, profile="wifi", seed=0)
        assert r["completed"] == 3 * n
        means.append(r["mean_delay_ms"])
    assert all(b >= a for a, b in zip(means, means[1:]))


def test_concurrent_payments_share_one_device():
    r = run_scalability(1, 4, profile="wifi", seed=3)
    assert r["completed"] == 4
    # the device works through its own burst one payment at a time
    d = sorted(r["delays_ms"])
    assert all(b > a for a, b in zip(d, d[1:]))
