import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sandmesh.fixtures import FixtureSet, load_app
from sandmesh.forensics import APK_MAGIC, classify, diff, snapshot
from sandmesh.sandbox import (
    EMPTY_MODEL,
    SINKHOLE_ADDR,
    Action,
    ActionKind,
    BehaviorModel,
    ConfigError,
    LifecycleError,
    NetLogEntry,
    Rule,
    SealedError,
    Trigger,
    TriggerKind,
    VmLifecycle,
    boot,
    content_for,
    install_and_launch,
    netsim_respond,
    run_timers,
    spawn_pair,
    stimulate,
    stop_and_snapshot,
    valid_vm_history,
)

FX = FixtureSet.builtin()
BASE = FX.baseline
SMS_STORE = "/data/data/com.android.providers.telephony/databases/mmssms.db"


def ready_pair(seed=1):
    p = spawn_pair("j", seed, BASE)
    assert boot(p, 0.0, seed) is VmLifecycle.READY
    return p


def every(period, host="c2.example", proto="HTTP"):
    return BehaviorModel("t", (Rule(Trigger(TriggerKind.EVERY, period_s=period),
                                    (Action(ActionKind.NET_REQUEST, host=host, protocol=proto),)),))


# -- spawn / boot -----------------------------------------------------------------


def test_spawn_then_stop_is_baseline():
    p = spawn_pair("j", 1, BASE)
    snap, net, root = stop_and_snapshot(p)
    assert diff(snapshot(BASE), snap).is_empty()
    assert net == () and root is False
    assert p.history == [VmLifecycle.CREATED, VmLifecycle.STOPPED]


def test_two_spawns_same_seed_identical():
    a, b = spawn_pair("j", 5, BASE), spawn_pair("j", 5, BASE)
    assert snapshot(a.fs).records == snapshot(b.fs).records


def test_spawn_does_not_apply_app_effects():
    p = spawn_pair("j", 1, BASE)
    assert snapshot(p.fs).records == snapshot(BASE).records


def test_missing_baseline_is_config_error():
    with pytest.raises(ConfigError):
        spawn_pair("j", 1, None)


def test_boot_extremes():
    assert all(boot(spawn_pair("j", s, BASE), 0.0, s) is VmLifecycle.READY for s in range(50))
    assert all(boot(spawn_pair("j", s, BASE), 1.0, s) is VmLifecycle.FAILED_IP_TIMEOUT for s in range(50))


def test_boot_failure_rate_within_central_99pct_interval():
    fails = sum(boot(spawn_pair("j", s, BASE), 0.03, s) is VmLifecycle.FAILED_IP_TIMEOUT for s in range(1261))
    # central 99% of Binomial(1261, 0.03) is roughly [23, 54]
    assert 23 <= fails <= 54


def test_boot_outcome_is_pure_function_of_seed():
    for s in range(30):
        assert boot(spawn_pair("j", s, BASE), 0.4, s) is boot(spawn_pair("k", s, BASE), 0.4, s)


def test_boot_requires_created():
    p = ready_pair()
    with pytest.raises(LifecycleError):
        boot(p, 0.0, 1)


# -- install / timers / network ------------------------------------------------------


def test_empty_model_changes_nothing():
    p = ready_pair()
    install_and_launch(p, EMPTY_MODEL)
    stimulate(p, 300)
    snap, net, _ = stop_and_snapshot(p)
    assert diff(snapshot(BASE), snap).is_empty() and net == ()
    assert valid_vm_history(p.history)


def test_anserver_drops_apk_disguised_as_db():
    app = load_app("builtin:anserver_a")
    p = ready_pair()
    install_and_launch(p, app.model, app.ui_graph)
    path = "/data/data/com.sec.android.providers.drm/files/anserva.db"
    assert classify(p.fs.read(path)) == "zip/apk"


def test_smshider_escalates_deletes_and_beacons_once():
    app = load_app("builtin:smshider")
    p = ready_pair()
    install_and_launch(p, app.model, app.ui_graph)
    stimulate(p, 300)
    snap, net, root = stop_and_snapshot(p)
    assert root is True
    assert SMS_STORE not in snap
    assert "/system/app/com.android.system.update.apk" in snap
    assert sum(e.direction == "request" for e in net) == 1


def test_protected_write_denied_without_root():
    model = BehaviorModel("t", (Rule(Trigger(TriggerKind.ON_INSTALL),
                                     (Action(ActionKind.CREATE_FILE, "/system/xbin/implant", "binary"),)),))
    p = ready_pair()
    install_and_launch(p, model)
    assert "/system/xbin/implant" not in p.fs
    assert len(p.denied) == 1


@pytest.mark.parametrize("period,window,want", [(300, 300, 1), (300, 299, 0), (60, 300, 5), (7, 100, 14)])
def test_timer_counts(period, window, want):
    p = ready_pair()
    install_and_launch(p, every(period))
    run_timers(p, window)
    reqs = [e for e in p.net_log if e.direction == "request"]
    assert len(reqs) == want
    assert [e.timestamp_s for e in reqs] == [period * k for k in range(1, want + 1)]


def test_run_timers_is_incremental():
    p = ready_pair()
    install_and_launch(p, every(60))
    run_timers(p, 130)
    run_timers(p, 130)
    run_timers(p, 300)
    assert sum(e.direction == "request" for e in p.net_log) == 5


def test_netsim_canned_responses():
    dns = netsim_respond(NetLogEntry(1.0, "request", "DNS", "evil.example", "q", 10))
    http = netsim_respond(NetLogEntry(1.0, "request", "HTTP", "evil.example", "GET /", 5))
    smtp = netsim_respond(NetLogEntry(1.0, "request", "SMTP", "mx.example", "MAIL", 5))
    other = netsim_respond(NetLogEntry(1.0, "request", "IRC", "irc.example", "NICK", 5))
    assert SINKHOLE_ADDR in dns.payload_tag
    assert http.payload_tag.startswith("200")
    assert smtp.payload_tag.startswith("250")
    assert other.payload_tag == "REFUSED"
    assert {r.direction for r in (dns, http, smtp, other)} == {"response"}


def test_crash_on_install_still_collects():
    model = BehaviorModel("t", (Rule(Trigger(TriggerKind.ON_INSTALL), (
        Action(ActionKind.CREATE_FILE, "/data/local/tmp/x", "text"),
        Action(ActionKind.CRASH),
        Action(ActionKind.CREATE_FILE, "/data/local/tmp/never", "text"),
    )),))
    p = ready_pair()
    install_and_launch(p, model)
    stimulate(p, 300)
    snap, _, _ = stop_and_snapshot(p)
    assert p.crashed and "/data/local/tmp/x" in snap and "/data/local/tmp/never" not in snap


def test_sealed_pair_rejects_appends():
    p = ready_pair()
    install_and_launch(p, every(60))
    stop_and_snapshot(p)
    with pytest.raises(SealedError):
        p.apply(Action(ActionKind.NET_REQUEST, host="h", protocol="DNS"), 999)
    with pytest.raises(SealedError):
        stop_and_snapshot(p)


def test_apk_content_has_zip_magic():
    assert content_for("apk", "/x").startswith(APK_MAGIC)
    assert content_for("apk", "/x") == content_for("apk", "/x")
    assert content_for("apk", "/x") != content_for("apk", "/y")


def test_behavior_model_round_trip_and_errors():
    for name in ("droidkungfu_a", "anserver_a", "smshider"):
        m = load_app(f"builtin:{name}").model
        assert BehaviorModel.from_json(m.to_json()) == m
    with pytest.raises(ConfigError):
        BehaviorModel.from_json({"app_id": "x", "rules": [{"trigger": {"kind": "every"}, "actions": []}]})
    with pytest.raises(ConfigError):
        BehaviorModel.from_json({"app_id": "x", "rules": [{"trigger": {"kind": "on_install"},
                                                           "actions": [{"kind": "CREATE_FILE", "path": "rel"}]}]})


# -- properties -------------------------------------------------------------------

PATHS = ["/data/a", "/data/b", "/sdcard/c", "/system/d", SMS_STORE, "/data/system/packages.xml"]

action_st = st.one_of(
    st.builds(Action, st.just(ActionKind.CREATE_FILE), st.sampled_from(PATHS), st.sampled_from(["apk", "text", "binary"])),
    st.builds(Action, st.just(ActionKind.MODIFY_FILE), st.sampled_from(PATHS), st.sampled_from(["sqlite", "text"])),
    st.builds(Action, st.just(ActionKind.DELETE_FILE), st.sampled_from(PATHS)),
    st.builds(Action, st.just(ActionKind.NET_REQUEST), host=st.sampled_from(["a.cn", "b.com"]),
              protocol=st.sampled_from(["DNS", "HTTP", "SMTP", "FTP"])),
    st.just(Action(ActionKind.ESCALATE_ROOT)),
)
rule_st = st.builds(
    Rule,
    st.one_of(st.just(Trigger(TriggerKind.ON_INSTALL)),
              st.builds(lambda p: Trigger(TriggerKind.EVERY, period_s=p), st.sampled_from([25.0, 60.0, 100.0, 300.0]))),
    st.lists(action_st, max_size=4).map(tuple),
)
model_st = st.lists(rule_st, max_size=4).map(lambda rs: BehaviorModel("rand", tuple(rs)))


def replay_oracle(fired):
    """Apply the fired action list to the baseline naively."""
    files = {p: vf.content for p, vf in BASE.iter_files()}
    root = False
    for _, a in fired:
        if a.kind is ActionKind.ESCALATE_ROOT:
            root = True
        elif a.kind in (ActionKind.CREATE_FILE, ActionKind.MODIFY_FILE):
            files[a.path] = content_for(a.content_tag, a.path)
        elif a.kind is ActionKind.DELETE_FILE:
            files.pop(a.path, None)
    return files, root


@settings(max_examples=150, deadline=None)
@given(model_st, st.integers(0, 1000), st.sampled_from([60.0, 299.0, 300.0]))
def test_random_models_match_replay_oracle(model, seed, window):
    p = ready_pair(seed)
    install_and_launch(p, model)
    stimulate(p, window)
    snap, net, root = stop_and_snapshot(p)
    files, want_root = replay_oracle(p.fired)
    assert {path: p.fs.read(path) for path in snap.paths()} == files
    assert root == want_root
    reqs = [e for e in net if e.direction == "request"]
    resps = [e for e in net if e.direction == "response"]
    assert len(reqs) == len(resps)
    n_net = sum(a.kind is ActionKind.NET_REQUEST for _, a in p.fired)
    assert len(reqs) == n_net
    for i in range(0, len(net), 2):
        assert net[i].direction == "request" and net[i + 1].direction == "response"
    times = [e.timestamp_s for e in net]
    assert times == sorted(times)
    assert valid_vm_history(p.history) and p.state is VmLifecycle.STOPPED


@settings(max_examples=50, deadline=None)
@given(model_st, st.integers(0, 1000))
def test_same_seed_same_outcome(model, seed):
    outs = []
    for _ in range(2):
        p = ready_pair(seed)
        install_and_launch(p, model)
        stimulate(p, 300)
        outs.append(stop_and_snapshot(p))
    assert outs[0] == outs[1]


def test_vm_history_validator_rejects_skips():
    V = VmLifecycle
    assert not valid_vm_history([V.CREATED, V.READY])
    assert not valid_vm_history([V.BOOTING])
    assert not valid_vm_history([V.CREATED, V.BOOTING, V.ACQUIRING_IP, V.READY, V.BOOTING])
    assert valid_vm_history([V.CREATED, V.BOOTING, V.ACQUIRING_IP, V.FAILED_IP_TIMEOUT])


def test_random_lifecycles_only_take_legal_steps():
    for s in range(200):
        rng = random.Random(s)
        p = spawn_pair("j", s, BASE)
        if boot(p, rng.random(), s) is VmLifecycle.READY and rng.random() < 0.7:
            install_and_launch(p, load_app(f"builtin:{rng.choice(['benign', 'smshider', 'droidkungfu_a'])}").model)
            stimulate(p, rng.choice([10, 300]))
        stop_and_snapshot(p)
        assert valid_vm_history(p.history)
