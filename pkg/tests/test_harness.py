import json

import pytest

from dstack_sim import attacks, walkthrough
from dstack_sim.audit import audit, parse_export, report_text
from dstack_sim.cli import main
from dstack_sim.errors import AuditParseError, DeliveryError, ScenarioError
from dstack_sim.governance import KmsAuth
from dstack_sim.simnet import SimNetwork
from dstack_sim.system import GenesisConfig


def test_walkthrough_is_byte_identical_per_seed():
    a = walkthrough.report_json(walkthrough.run_walkthrough(7))
    b = walkthrough.report_json(walkthrough.run_walkthrough(7))
    assert a == b
    assert a != walkthrough.report_json(walkthrough.run_walkthrough(8))


def test_happy_path_verifies_every_step():
    report = walkthrough.run_walkthrough(42)
    assert report["ok"] and report["broken_at"] is None
    assert [s["name"] for s in report["steps"]] == list(walkthrough.STEPS)
    assert all(s["status"] == "verified" for s in report["steps"])
    assert walkthrough.report_text(report).endswith("PASS")


@pytest.mark.parametrize("fault", sorted(walkthrough.FAULTS))
def test_each_fault_breaks_its_own_step(fault):
    report = walkthrough.run_walkthrough(42, fault)
    step = walkthrough.FAULTS[fault]
    assert report["broken_at"] == step and report["ok"]
    statuses = [s["status"] for s in report["steps"]]
    assert statuses[: step - 1] == ["verified"] * (step - 1)
    assert statuses[step - 1] == "broken"
    assert set(statuses[step:]) <= {"skipped"}


def test_unknown_fault_is_rejected():
    with pytest.raises(ScenarioError):
        walkthrough.run_walkthrough(42, "no-such-fault")


@pytest.mark.parametrize("name", attacks.ATTACKS)
def test_attack_scenarios_hold(name):
    verdict = attacks.run_attack(name)
    assert verdict["ok"], attacks.verdict_text(verdict)


def test_unknown_attack_is_rejected():
    with pytest.raises(ScenarioError):
        attacks.run_attack("no-such-attack")


def test_attack_expectations_are_checked():
    scenario = attacks.load_scenario("fake-quote")
    # Flip one expectation: the runner must report the mismatch rather than pass.
    step = next(s for s in scenario["expected"] if s["expect"] != "ok")
    step["expect"] = "ok"
    verdict = attacks.run_scenario(scenario, 42)
    assert not verdict["ok"]


def test_genesis_config_rejects_unknown_keys():
    with pytest.raises(ScenarioError):
        GenesisConfig.from_dict({"governers": 3})
    assert GenesisConfig.from_dict(GenesisConfig().to_dict()) == GenesisConfig()


# -- audit ----------------------------------------------------------------------


def _export(deployed) -> list[str]:
    return deployed.system.kms_auth.export_lines()


def test_audit_roundtrip_is_clean(deployed):
    lines = _export(deployed)
    for live in (None, deployed.system.kms_auth):
        report = audit(lines, live)
        assert report.ok and report.diff == [] and report.first_byte_diff is None
    assert "PASS" in report_text(report)


def test_audit_pinpoints_edited_entry(deployed):
    lines = _export(deployed)
    index = 4
    event = json.loads(lines[index])
    event["payload"]["tampered"] = True
    lines[index] = json.dumps(event)
    report = audit(lines)
    assert not report.ok and report.divergence_index == index


def test_audit_of_truncated_log_differs_from_live(deployed):
    lines = _export(deployed)
    events = [l for l in lines if "checkpoint" not in json.loads(l)]
    report = audit(events[:-3], deployed.system.kms_auth)
    assert report.chain_ok and report.diff and report.first_byte_diff is not None
    # Against its own checkpoint the truncation shows up too.
    assert audit(events[:-3] + [lines[-1]]).diff


def test_audit_reports_line_of_bad_json(deployed):
    lines = _export(deployed)
    lines[2] = "{not json"
    with pytest.raises(AuditParseError) as exc:
        parse_export(lines)
    assert exc.value.line == 3


def test_replay_matches_live_state(deployed):
    auth = deployed.system.kms_auth
    assert KmsAuth.replay(list(auth.log)).state_bytes() == auth.state_bytes()


# -- network --------------------------------------------------------------------


def test_network_drop_partition_and_heal():
    net = SimNetwork(seed=1)
    assert net.send("a", "b", b"x") == b"x"
    net.drop("a", "b", count=1)
    with pytest.raises(DeliveryError):
        net.send("a", "b", b"x")
    assert net.send("a", "b", b"y") == b"y"
    net.partition({"a"}, {"b"})
    with pytest.raises(DeliveryError):
        net.send("a", "b", b"x")
    assert net.send("b", "b", b"self") == b"self"
    net.heal()
    assert net.send("a", "b", b"z") == b"z"
    assert [d.delivered for d in net.trace] == [True, False, True, False, True, True]


def test_network_delay_advances_clock():
    net = SimNetwork(seed=1)
    net.delay("a", "b", 5)
    net.send("a", "b", b"x")
    assert net.clock.now == 5 and net.trace[-1].tick == 5


def test_random_drops_are_reproducible():
    def pattern(seed):
        net = SimNetwork(seed=seed)
        net.drop_randomly(0.5)
        out = []
        for _ in range(64):
            try:
                net.send("a", "b", b"m")
                out.append(1)
            except DeliveryError:
                out.append(0)
        return out
    assert pattern(3) == pattern(3)
    assert 0 < sum(pattern(3)) < 64


# -- command line ---------------------------------------------------------------


def test_cli_walkthrough_and_fault_exit_codes(capsys):
    assert main(["walkthrough", "--seed", "42"]) == 0
    assert main(["--json", "walkthrough", "--fault", "report-data-swap"]) == 0
    out = capsys.readouterr().out
    assert json.loads(out[out.index("{"):])["broken_at"] == 7


def test_cli_export_then_audit(tmp_path, capsys):
    log = tmp_path / "log.jsonl"
    assert main(["walkthrough", "--export-log", str(log)]) == 0
    assert main(["audit", str(log)]) == 0
    lines = log.read_text().splitlines()
    lines[1] = lines[1].replace('"seq": 1', '"seq": 9')
    log.write_text("\n".join(lines) + "\n")
    assert main(["audit", str(log)]) == 1
    log.write_text("garbage\n")
    assert main(["audit", str(log)]) == 1
    assert "line 1" in capsys.readouterr().err


def test_cli_attack_all(capsys):
    assert main(["attack", "all"]) == 0
    with pytest.raises(SystemExit) as exc:
        main(["attack", "no-such-attack"])
    assert exc.value.code == 2


def test_cli_seal_unseal_roundtrip(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "plain.txt").write_bytes(b"hello volume")
    assert main(["seal", "--in", "plain.txt", "--out", "vol.bin"]) == 0
    assert main(["unseal", "--in", "vol.bin", "--out", "back.txt"]) == 0
    assert (tmp_path / "back.txt").read_bytes() == b"hello volume"
    # The replica holds a different disk key.
    assert main(["unseal", "--in", "vol.bin", "--out", "x.txt", "--instance", "replica"]) == 1
    assert main(["migrate", "--in", "vol.bin", "--out", "moved.bin", "--to", "replica"]) == 0
    assert main(["unseal", "--in", "moved.bin", "--out", "y.txt", "--instance", "replica"]) == 0
    assert (tmp_path / "y.txt").read_bytes() == b"hello volume"
