import math

import pytest

from coplan.actions import ActionTemplate
from coplan.domain import BUNDLED_DOMAINS, load_bundled
from coplan.sim import (
    CAO_SIGMA_M,
    EVENT_KINDS,
    MIN_PERCEIVE_S,
    EventLog,
    HumanPolicy,
    PerceiveContextError,
    PerceiveKind,
    PolicyKind,
    Scenario,
    Session,
    ShearParams,
    apply_handover_grasp,
    replay,
    run,
    run_session,
    scenario_from_record,
    scenario_record,
    simulate_perceive,
)
from coplan.state import AgentKind, StateError, new_state


def compliant(domain: str, seed: int = 42) -> Scenario:
    return Scenario(domain=domain, seed=seed)


def interactive_session(domain: str = "kritter", seed: int = 5) -> Session:
    s = Session(
        Scenario(
            domain=domain, seed=seed, policy=HumanPolicy(kind=PolicyKind.INTERACTIVE)
        )
    )
    s.start()
    return s


def drain(session: Session) -> None:
    while session.advance():
        pass


def human_name(session: Session) -> str:
    return next(
        a.name for a in session.decl.agents if a.kind is AgentKind.HUMAN
    )


@pytest.fixture(scope="module")
def micro_log() -> EventLog:
    return run(compliant("hand_over_micro", seed=7))


@pytest.fixture(scope="module")
def oddvar_log() -> EventLog:
    return run(compliant("oddvar"))


# -- liveness and determinism ------------------------------------------


@pytest.mark.parametrize("name", BUNDLED_DOMAINS)
def test_bundled_domain_completes(name):
    log = run(compliant(name))
    assert log.goal_reached
    report = replay(log)
    assert report.violations == []
    assert report.ok


def test_log_bytes_deterministic(oddvar_log):
    again = run(compliant("oddvar"))
    assert oddvar_log.dump() == again.dump()


def test_event_stream_invariants(oddvar_log):
    last_t = 0.0
    open_action: dict[str, int] = {}
    for i, event in enumerate(oddvar_log.events):
        assert event["seq"] == i
        assert event["t"] >= last_t
        last_t = event["t"]
        assert event["kind"] in EVENT_KINDS
        agent = event["agent"]
        if event["kind"] == "action_start":
            assert agent not in open_action, f"overlap at seq {i} for {agent}"
            open_action[agent] = i
        elif event["kind"] == "action_end":
            assert agent in open_action, f"unmatched end at seq {i}"
            del open_action[agent]
    assert not open_action
    assert oddvar_log.events[-1]["kind"] == "goal_reached"


def test_log_roundtrip(tmp_path, micro_log):
    text = micro_log.dump()
    parsed = EventLog.parse(text)
    assert parsed.dump() == text
    assert parsed.goal_reached
    path = tmp_path / "session.ndjson"
    micro_log.write(path)
    assert EventLog.read(path).dump() == text


def test_replay_flags_missing_step(micro_log):
    kept = [
        e
        for e in micro_log.events
        if not (
            e["kind"] == "action_end"
            and e["payload"]["status"] == "ok"
            and e["payload"]["action"]["template"] == "grasp"
        )
    ]
    assert len(kept) < len(micro_log.events)
    broken = EventLog(micro_log.scenario, kept, micro_log.final_state)
    report = replay(broken)
    assert not report.ok
    assert report.violations or report.mismatch is not None


def test_replay_flags_corrupted_final_state(micro_log):
    twisted = dict(micro_log.final_state)
    twisted["clock"] = twisted["clock"] + 100.0
    report = replay(EventLog(micro_log.scenario, micro_log.events, twisted))
    assert not report.ok
    assert report.mismatch == "clock"


# -- the micro handover ------------------------------------------------


def test_micro_handover_order(micro_log):
    events = micro_log.events
    waits = [
        e
        for e in events
        if e["kind"] == "wait_satisfied" and e["payload"]["condition"] == "pull_signal"
    ]
    assert len(waits) == 1
    after = events[waits[0]["seq"] :]
    release = next(
        e
        for e in after
        if e["kind"] == "action_start"
        and e["payload"]["action"]["template"] == "release"
    )
    assert release["agent"] == waits[0]["agent"]  # the giver lets go
    pulls = [
        e
        for e in events
        if e["kind"] == "human_event" and e["payload"].get("event") == "pull_tool"
    ]
    assert len(pulls) == 1
    handover_end = next(
        e
        for e in events
        if e["kind"] == "action_end" and e["payload"].get("handover")
    )
    assert pulls[0]["t"] <= handover_end["t"] <= waits[0]["t"] <= release["t"]


def test_crossing_delay_formula():
    assert ShearParams().crossing_delay() == pytest.approx(0.4)
    custom = ShearParams(baseline=0.2, noise_sigma=0.03, ramp=0.6, k=5.0)
    assert custom.crossing_delay() == pytest.approx(5.0 * 0.03 / 0.6)


def test_micro_pull_detector_latency(micro_log):
    handover_end = next(
        e
        for e in micro_log.events
        if e["kind"] == "action_end" and e["payload"].get("handover")
    )
    fired = next(
        e
        for e in micro_log.events
        if e["kind"] == "perceive_result"
        and e["payload"]["kind"] == "detect_tool_pulling"
        and e["payload"]["data"]["pull_detected"]
    )
    assert fired["t"] - handover_end["t"] == pytest.approx(
        ShearParams().crossing_delay(), abs=1e-9
    )


def test_handover_grasp_rules():
    domain = load_bundled("hand_over_micro")
    decl = domain.declarations
    state = new_state(decl)
    robot = next(a for a in decl.agents if a.kind is AgentKind.ROBOT)
    human = next(a for a in decl.agents if a.kind is AgentKind.HUMAN)
    tool = next(o.name for o in decl.objects if o.kind == "tool")
    with pytest.raises(StateError):
        apply_handover_grasp(state, decl, human.name, human.effectors[0], tool)
    held = state.object_traits[tool]
    from dataclasses import replace

    holding = replace(
        state,
        effector_free=state.effector_free
        | {(robot.name, robot.effectors[0]): False},
        object_traits=state.object_traits
        | {
            tool: replace(
                held, grasped_by=frozenset({(robot.name, robot.effectors[0])})
            )
        },
    )
    joined = apply_handover_grasp(
        holding, decl, human.name, human.effectors[0], tool, duration=0.5
    )
    assert len(joined.object_traits[tool].grasped_by) == 2
    assert joined.clock == pytest.approx(0.5)
    with pytest.raises(StateError):
        # same-side second grasp is not a handover
        apply_handover_grasp(
            joined, decl, human.name, human.effectors[1], tool
        )


# -- disturbance policies ----------------------------------------------


def test_independent_picker_replans():
    log = run(
        Scenario(
            domain="kritter",
            seed=7,
            policy=HumanPolicy(kind=PolicyKind.INDEPENDENT_PICKER, p_pick=1.0),
        )
    )
    picks = [
        e
        for e in log.of_kind("human_event")
        if e["payload"].get("event") == "pick"
    ]
    assert len(picks) >= 2
    assert len(log.of_kind("replan")) >= 1
    assert log.goal_reached
    assert replay(log).ok


def test_pick_rate_scales_with_probability():
    def picks(p: float) -> int:
        log = run(
            Scenario(
                domain="kritter",
                seed=1,
                policy=HumanPolicy(kind=PolicyKind.INDEPENDENT_PICKER, p_pick=p),
            )
        )
        assert log.goal_reached
        return sum(
            1
            for e in log.of_kind("human_event")
            if e["payload"].get("event") == "pick"
        )

    assert 1 <= picks(0.3) < picks(1.0)


def test_error_prone_drops_and_recovers():
    log = run(
        Scenario(
            domain="ragrund",
            seed=3,
            policy=HumanPolicy(kind=PolicyKind.ERROR_PRONE, p_drop=0.15),
        )
    )
    drops = [
        e
        for e in log.of_kind("human_event")
        if e["payload"].get("event") == "drop"
    ]
    assert drops
    assert log.goal_reached
    assert replay(log).ok


def test_variable_speed_stretches_session():
    base = run(compliant("ragrund", seed=3))
    slow = run(
        Scenario(
            domain="ragrund",
            seed=3,
            policy=HumanPolicy(kind=PolicyKind.VARIABLE_SPEED, scale=1.6),
        )
    )
    assert slow.goal_reached
    assert slow.events[-1]["t"] > base.events[-1]["t"]


# -- perception models -------------------------------------------------


def test_cao_noise_profile():
    session = interactive_session(seed=13)
    errors: list[float] = []
    for _ in range(1000):
        result = simulate_perceive(PerceiveKind.CHECK_AVAILABLE_OBJECTS, session)
        for entry in result.data["objects"]:
            true = session.truth.object_poses[entry["object"]].location
            assert entry["region"] == true.region
            errors.append(entry["x"] - true.coords[0])
            errors.append(entry["y"] - true.coords[1])
    n = len(errors)
    assert n >= 2000
    mean = sum(errors) / n
    std = math.sqrt(sum((e - mean) ** 2 for e in errors) / n)
    assert abs(mean) < CAO_SIGMA_M / 20
    assert std == pytest.approx(CAO_SIGMA_M, rel=0.05)
    within = sum(1 for e in errors if abs(e) <= 3 * CAO_SIGMA_M) / n
    assert within >= 0.995


def test_cao_snapshot_deterministic():
    a = simulate_perceive(
        PerceiveKind.CHECK_AVAILABLE_OBJECTS, interactive_session(seed=9)
    )
    b = simulate_perceive(
        PerceiveKind.CHECK_AVAILABLE_OBJECTS, interactive_session(seed=9)
    )
    assert a.data == b.data


def test_cao_excludes_held_objects():
    session = interactive_session(seed=5)
    while session.advance():
        held = {
            o.name
            for o in session.decl.objects
            if session.truth.object_traits[o.name].grasped_by
        }
        if held:
            break
    assert held
    result = simulate_perceive(PerceiveKind.CHECK_AVAILABLE_OBJECTS, session)
    seen = {entry["object"] for entry in result.data["objects"]}
    assert not held & seen


def test_detect_empty_box_immediate_when_empty():
    fresh = interactive_session(seed=2)
    before = simulate_perceive(PerceiveKind.DETECT_EMPTY_BOX, fresh)
    assert before.data["box_empty"] is False
    assert before.duration > MIN_PERCEIVE_S

    done = run_session(compliant("kritter"))
    after = simulate_perceive(PerceiveKind.DETECT_EMPTY_BOX, done)
    assert after.data["box_empty"] is True
    assert after.duration == pytest.approx(MIN_PERCEIVE_S)


def test_detect_tool_pulling_needs_grip():
    with pytest.raises(PerceiveContextError):
        simulate_perceive(PerceiveKind.DETECT_TOOL_PULLING, interactive_session())


# -- operator injection ------------------------------------------------


def free_tray_part(session: Session) -> str:
    human = human_name(session)
    reach = session.decl.agent(human).reach
    for step in session.plan.steps:
        obj = step.object
        if (
            step.agent != human
            and step.template is ActionTemplate.GRASP
            and obj
            and session.decl.object(obj).kind == "component"
            and not session.truth.object_traits[obj].grasped_by
            and not session.truth.object_traits[obj].assembled
            and session.truth.object_poses[obj].location.region in reach
            and session.truth.object_poses[obj].location.region != "shared_ws"
        ):
            return obj
    raise AssertionError("no pickable part left")


def test_injected_pick_triggers_replan():
    session = interactive_session()
    human = human_name(session)
    for _ in range(400):
        # picks are only legal while the human is actually free
        if (
            len(session.events) > 40
            and session._active[human] is None
            and not session._queue[human]
        ):
            break
        if not session.advance():
            break
    target = free_tray_part(session)
    result = session.inject_human_event({"event": "pick", "object": target})
    assert result.accepted
    drain(session)  # parks at the tool handover
    assert session._handover is not None
    assert session.inject_human_event({"event": "pull_tool"}).accepted
    drain(session)
    log = session.event_log()
    assert session.finished
    assert len(log.of_kind("replan")) >= 1
    assert replay(log).ok


def test_injected_pick_of_held_object_rejected():
    session = interactive_session()
    human = human_name(session)
    held = None
    while session.advance():
        for obj in session.decl.objects:
            holders = session.truth.object_traits[obj.name].grasped_by
            if holders and any(ref[0] != human for ref in holders):
                held = obj.name
                break
        if held:
            break
    assert held
    result = session.inject_human_event({"event": "pick", "object": held})
    assert not result.accepted
    assert result.violations
    assert result.violations[0].code == "already_grasped"


def test_injection_validation():
    session = interactive_session()
    assert not session.inject_human_event({"event": "pick", "object": "nope"}).accepted
    assert not session.inject_human_event({"event": "lunch_break"}).accepted
    assert not session.inject_human_event({"event": "pull_tool"}).accepted


def test_idle_override_parks_and_resumes():
    session = interactive_session()
    for _ in range(40):
        session.advance()
    assert session.inject_human_event(
        {"event": "idle_toggle", "idle": False}
    ).accepted
    drain(session)
    parked_at = session.clock
    assert not session.finished
    assert session.inject_human_event(
        {"event": "idle_toggle", "idle": True}
    ).accepted
    for _ in range(50):
        if not session.advance():
            break
    assert session.clock > parked_at


def test_interactive_parks_at_handover_until_pull():
    session = interactive_session(seed=11)
    drain(session)
    assert not session.finished
    assert session._handover is not None
    assert session.inject_human_event({"event": "pull_tool"}).accepted
    drain(session)
    assert session.finished


# -- scenario plumbing -------------------------------------------------


def test_scenario_roundtrip():
    scenario = Scenario(
        domain="ragrund",
        seed=17,
        policy=HumanPolicy(kind=PolicyKind.INDEPENDENT_PICKER, p_pick=0.25),
        perception_noise=0.05,
    )
    record = scenario_record(scenario)
    back = scenario_from_record(record)
    assert scenario_record(back) == record
    assert back.policy.kind is PolicyKind.INDEPENDENT_PICKER
    assert back.policy.p_pick == pytest.approx(0.25)


def test_unknown_domain_rejected():
    with pytest.raises(ValueError):
        run(compliant("nope"))


def test_run_rejects_interactive_policy():
    with pytest.raises(ValueError):
        run_session(
            Scenario(
                domain="kritter",
                policy=HumanPolicy(kind=PolicyKind.INTERACTIVE),
            )
        )
