"""Delivery acceptance gate.

One test per top-level criterion, each at its stated tolerance. The -v
output of this file is the pass/fail sheet for the whole build: plan
calibration, planner speed, action-frame conformance, search-oracle
equivalence on generated micro-domains, fluency identity and calibration,
replanning robustness, determinism, and the domain-language fixed point.
"""

import json
import random
import statistics
import time
from collections import deque
from dataclasses import replace

from coplan.actions import (
    EDITS,
    ActionTemplate,
    PerceiveKind,
    PrimitiveAction,
    WaitCondition,
    affected_features,
    apply,
    preconditions,
)
from coplan.domain import BUNDLED_DOMAINS, load_bundled, parse, serialize
from coplan.metrics import build_timeline, fluency
from coplan.planner import plan as build_plan
from coplan.sim import (
    DomainSource,
    EventLog,
    HumanPolicy,
    PolicyKind,
    Scenario,
    replay,
    run,
    state_record,
)
from coplan.state import (
    AgentDecl,
    AgentKind,
    EntityDeclarations,
    FeatureFamily,
    Location,
    ObjectDecl,
    Region,
    check_state,
    diff,
    new_state,
)

EXPECTED_PLAN_LENGTHS = {
    "oddvar": 545,
    "hutten": 385,
    "kritter": 322,
    "ragrund": 195,
}

FURNITURE = ("kritter", "ragrund", "hutten", "oddvar")

# Fluency calibration targets for the default Compliant batch, and the
# tolerance band around each.
PROFILE_TARGETS = {
    "robot_idle": 30.83,
    "concurrent_activity": 30.74,
    "human_idle": 24.33,
    "functional_delay": 3.86,
}
PROFILE_BAND_PP = 10.0


# -- criterion 1: exact plan lengths ----------------------------------


def test_bundled_plan_lengths_exact():
    started = time.perf_counter()
    measured = {}
    for name in FURNITURE:
        domain = load_bundled(name)
        measured[name] = len(build_plan(domain, new_state(domain.declarations)))
    elapsed = time.perf_counter() - started
    assert measured == EXPECTED_PLAN_LENGTHS
    assert elapsed < 5.0, f"planning all four domains took {elapsed:.2f} s"
    print(f"PASS plan lengths {measured} in {elapsed:.2f} s")


# -- criterion 2: planning-time ceilings ------------------------------


def _median_plan_seconds(name: str, runs: int = 10) -> float:
    domain = load_bundled(name)
    state = new_state(domain.declarations)
    samples = []
    for _ in range(runs):
        t0 = time.perf_counter()
        build_plan(domain, state)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def test_planning_time_ceilings():
    slow = _median_plan_seconds("oddvar")
    quick = _median_plan_seconds("ragrund")
    assert slow <= 0.23, f"oddvar median {slow:.3f} s exceeds 0.23 s"
    assert quick <= 0.08, f"ragrund median {quick:.3f} s exceeds 0.08 s"
    print(f"PASS planning medians oddvar {slow * 1000:.1f} ms, "
          f"ragrund {quick * 1000:.1f} ms")


# -- criterion 3: action-frame conformance over 10,000 pairs ----------

EEA = FeatureFamily.EFFECTORS
AP = FeatureFamily.AGENT_POSE
OP = FeatureFamily.OBJECT_POSE
OC = FeatureFamily.OBJECT_TRAITS

# Frozen restatement of the per-template effect footprint; the walk diffs
# real transitions against it.
FROZEN_FOOTPRINT = {
    (ActionTemplate.GRASP, False): frozenset({EEA, AP, OC}),
    (ActionTemplate.GRASP, True): frozenset({EEA, AP, OC}),
    (ActionTemplate.RELEASE, False): frozenset({EEA, AP, OC}),
    (ActionTemplate.RELEASE, True): frozenset({EEA, AP, OC}),
    (ActionTemplate.MOVE, False): frozenset({AP}),
    (ActionTemplate.MOVE, True): frozenset({AP, OP}),
    (ActionTemplate.MANIPULATE, False): frozenset({AP, OP, OC}),
    (ActionTemplate.MANIPULATE, True): frozenset({AP, OP, OC}),
    (ActionTemplate.WAIT, False): frozenset(),
    (ActionTemplate.WAIT, True): frozenset(),
    (ActionTemplate.PERCEIVE, False): frozenset(),
    (ActionTemplate.PERCEIVE, True): frozenset(),
}


def _conformance_bench() -> EntityDeclarations:
    return EntityDeclarations(
        regions=(
            Region("robot_ws", (0.0, 0.0, 1.0, 1.0)),
            Region("shared_ws", (1.0, 0.0, 2.0, 1.0)),
            Region("human_ws", (2.0, 0.0, 3.0, 1.0), visible=False),
        ),
        agents=(
            AgentDecl(
                "R",
                AgentKind.ROBOT,
                ("r",),
                frozenset({"robot_ws", "shared_ws"}),
                frozenset({"grasp", "release", "move", "perceive", "wait"}),
            ),
            AgentDecl(
                "H",
                AgentKind.HUMAN,
                ("right", "left"),
                frozenset({"human_ws", "shared_ws"}),
                frozenset(
                    {"grasp", "release", "move", "manipulate", "perceive", "wait"}
                ),
            ),
        ),
        objects=(
            ObjectDecl("o1", Location("robot_ws", (0.3, 0.3))),
            ObjectDecl("o2", Location("shared_ws", (1.5, 0.5))),
            ObjectDecl("o3", Location("shared_ws", (1.2, 0.8))),
            ObjectDecl(
                "bin",
                Location("shared_ws", (1.8, 0.8)),
                kind="container",
                content=3,
            ),
        ),
    )


def _random_action(rng: random.Random, decl: EntityDeclarations) -> PrimitiveAction:
    agents = [(a.name, e) for a in decl.agents for e in a.effectors]
    objects = [o.name for o in decl.objects]
    agent, eff = rng.choice(agents)
    kind = rng.randrange(6)
    if kind == 0:
        return PrimitiveAction(ActionTemplate.GRASP, agent, eff, rng.choice(objects))
    if kind == 1:
        return PrimitiveAction(ActionTemplate.RELEASE, agent, eff, rng.choice(objects))
    if kind == 2:
        region = rng.choice(decl.regions)
        x = rng.uniform(region.bounds[0], region.bounds[2])
        y = rng.uniform(region.bounds[1], region.bounds[3])
        return PrimitiveAction(
            ActionTemplate.MOVE, agent, eff, target=Location(region.name, (x, y))
        )
    if kind == 3:
        name = rng.choice(sorted(EDITS))
        return PrimitiveAction(
            ActionTemplate.MANIPULATE,
            agent,
            eff,
            rng.choice(objects),
            manip_effect=EDITS[name],
            edit_name=name,
        )
    if kind == 4:
        return PrimitiveAction(
            ActionTemplate.WAIT, agent, wait_condition=WaitCondition("human_idle")
        )
    return PrimitiveAction(
        ActionTemplate.PERCEIVE, agent, perceive_kind=rng.choice(list(PerceiveKind))
    )


def test_action_frame_conformance_ten_thousand_pairs():
    decl = _conformance_bench()
    rng = random.Random(20240817)
    applied = 0
    state = new_state(decl)
    steps_in_walk = 0
    while applied < 10_000:
        if steps_in_walk >= 40:  # restart so walks keep visiting fresh corners
            state = new_state(decl)
            steps_in_walk = 0
        action = _random_action(rng, decl)
        steps_in_walk += 1
        if not preconditions(action, state, decl).ok:
            continue
        eff = action.effector or decl.agent(action.agent).effectors[0]
        holding = not state.effector_free.get((action.agent, eff), True)
        nxt = apply(action, state, decl, rng.uniform(0.5, 5.0))
        touched = diff(state, nxt).families()
        allowed = FROZEN_FOOTPRINT[(action.template, holding)]
        assert touched <= allowed, (action, touched, allowed)
        check_state(nxt, decl)
        state = nxt
        applied += 1
    print(f"PASS frame conformance on {applied} applied pairs")


# -- criterion 4: generated micro-domains vs a forward-search oracle --

# Part placements whose decompositions stay within twelve primitive steps:
# a shared part costs four (fit), a robot-side part eight (ferry + fit).
_MICRO_LAYOUTS = (
    ("shared",),
    ("robot",),
    ("shared", "shared"),
    ("robot", "shared"),
    ("shared", "robot"),
)


def _micro_source(rng: random.Random, index: int) -> tuple[str, list[str]]:
    layout = _MICRO_LAYOUTS[index % len(_MICRO_LAYOUTS)]
    parts = [f"p{i + 1}" for i in range(len(layout))]
    decoys = [f"d{i + 1}" for i in range(rng.randrange(0, 3))]
    lines = [
        f'domain "micro_{index}" {{',
        "  regions {",
        "    robot_ws (0.0, 0.0, 1.0, 1.0)",
        "    shared_ws (1.0, 0.0, 2.0, 1.0)",
        "    human_ws (2.0, 0.0, 3.0, 1.0) hidden",
        "  }",
        "  agents {",
        "    R robot caps [grasp, release, move, perceive, wait] "
        "reach [robot_ws, shared_ws] effectors [r]",
        "    H human caps [grasp, release, move, manipulate, perceive, wait] "
        "reach [human_ws, shared_ws] effectors [right, left]",
        "  }",
        "  objects {",
    ]
    for part, where in zip(parts, layout):
        if where == "robot":
            x = round(rng.uniform(0.1, 0.9), 2)
            lines.append(f"    {part} at robot_ws ({x}, 0.4)")
        else:
            x = round(rng.uniform(1.1, 1.9), 2)
            lines.append(f"    {part} at shared_ws ({x}, 0.7)")
    for i, decoy in enumerate(decoys):
        x = round(rng.uniform(2.1, 2.9), 2)
        lines.append(f"    {decoy} at human_ws ({x}, {0.2 + 0.2 * i}) kind tool")
    lines.append("  }")
    lines.append("  goal build_all()")
    calls = "".join(f"    part_task({p});\n" for p in parts)
    lines.append("  method build_all() {\n" + calls + "  }")
    lines.extend(
        [
            "  method part_task(p) pre [assembled(p)] {",
            "  }",
            "  method part_task(p) pre [at(p, shared_ws), not grasped(p)] {",
            "    fit(p);",
            "  }",
            "  method part_task(p) {",
            "    ferry(p);",
            "    fit(p);",
            "  }",
            "  method ferry(p) {",
            "    move(R, r, p);",
            "    grasp(R, r, p);",
            "    move(R, r, shared_ws);",
            "    release(R, r, p);",
            "  }",
            "  method fit(p) {",
            "    move(H, right, p);",
            "    grasp(H, right, p);",
            "    manipulate(H, right, p, assemble);",
            "    release(H, right, p);",
            "  }",
            "}",
        ]
    )
    return "\n".join(lines) + "\n", parts


def _digest(state, decl) -> str:
    return json.dumps(state_record(state.with_clock(0.0), decl), sort_keys=True)


def _oracle_candidates(decl, state, parts):
    """Goal-directed action menu; restricting it can only hide solutions."""
    out = []
    shared_center = decl.region_location("shared_ws")
    for agent in decl.agents:
        for eff in agent.effectors:
            held = state.held_object(agent.name, eff)
            if held is not None:
                out.append(
                    PrimitiveAction(ActionTemplate.RELEASE, agent.name, eff, held)
                )
                if "manipulate" in agent.capabilities and held in parts:
                    out.append(
                        PrimitiveAction(
                            ActionTemplate.MANIPULATE,
                            agent.name,
                            eff,
                            held,
                            manip_effect=EDITS["assemble"],
                            edit_name="assemble",
                        )
                    )
                if shared_center.region in agent.reach:
                    out.append(
                        PrimitiveAction(
                            ActionTemplate.MOVE, agent.name, eff, target=shared_center
                        )
                    )
                continue
            for part in parts:
                if state.object_traits[part].assembled:
                    continue
                loc = state.object_poses[part].location
                if loc.region in agent.reach:
                    out.append(
                        PrimitiveAction(
                            ActionTemplate.MOVE, agent.name, eff, target=loc
                        )
                    )
                    out.append(
                        PrimitiveAction(ActionTemplate.GRASP, agent.name, eff, part)
                    )
    return out


def _shortest_goal_path(decl, parts, depth_cap: int, node_cap: int = 50_000) -> int:
    """Breadth-first search over primitive actions; -1 when unreachable."""
    start = new_state(decl)
    if all(start.object_traits[p].assembled for p in parts):
        return 0
    seen = {_digest(start, decl)}
    frontier = deque([(start, 0)])
    expanded = 0
    while frontier:
        state, depth = frontier.popleft()
        if depth >= depth_cap:
            continue
        expanded += 1
        assert expanded <= node_cap, "oracle search budget exhausted"
        for action in _oracle_candidates(decl, state, parts):
            if not preconditions(action, state, decl).ok:
                continue
            nxt = apply(action, state, decl)
            if all(nxt.object_traits[p].assembled for p in parts):
                return depth + 1
            key = _digest(nxt, decl)
            if key in seen:
                continue
            seen.add(key)
            frontier.append((nxt, depth + 1))
    return -1


def test_micro_domain_plans_pass_search_oracle():
    rng = random.Random(99)
    started = time.perf_counter()
    checked = 0
    for index in range(50):
        source, parts = _micro_source(rng, index)
        domain = parse(DomainSource(source, origin=f"micro_{index}"))
        state = new_state(domain.declarations)
        built = build_plan(domain, state)
        assert 0 < len(built) <= 12, f"micro_{index} plan length {len(built)}"
        # executability: every step's preconditions hold when applied in order
        current = state
        for step in built.steps:
            current = apply(step, current, domain.declarations)
        assert all(
            current.object_traits[p].assembled for p in parts
        ), f"micro_{index} plan misses the goal"
        shortest = _shortest_goal_path(domain.declarations, parts, depth_cap=12)
        assert shortest != -1, f"micro_{index}: search found no goal path"
        assert shortest <= len(built), (index, shortest, len(built))
        checked += 1
    elapsed = time.perf_counter() - started
    assert elapsed < 60.0, f"oracle sweep took {elapsed:.1f} s"
    print(f"PASS {checked} micro-domains vs search oracle in {elapsed:.1f} s")


# -- criteria 5 and 6: fluency identity; replanning robustness --------


def _identity_residual(log: EventLog) -> float:
    report = fluency(build_timeline(log))
    values = (
        report.human_idle,
        report.robot_idle,
        report.functional_delay,
        report.concurrent_activity,
    )
    for value in values:
        assert 0.0 <= value <= 100.0, (value, log.scenario)
    return abs(
        report.concurrent_activity
        + report.human_idle
        + report.robot_idle
        - report.functional_delay
        - 100.0
    )


def test_fluency_identity_over_thousand_sessions():
    policies = (
        HumanPolicy(PolicyKind.COMPLIANT),
        HumanPolicy(PolicyKind.INDEPENDENT_PICKER, p_pick=0.5),
        HumanPolicy(PolicyKind.ERROR_PRONE, p_drop=0.1),
        HumanPolicy(PolicyKind.VARIABLE_SPEED, scale=1.5),
    )
    sessions = 0
    worst = 0.0
    for seed in range(10):
        for name in FURNITURE:
            for policy in policies:
                log = run(Scenario(domain=name, seed=seed, policy=policy))
                worst = max(worst, _identity_residual(log))
                sessions += 1
    seed = 0
    while sessions < 1000:
        policy = policies[seed % len(policies)]
        log = run(Scenario(domain="hand_over_micro", seed=seed, policy=policy))
        worst = max(worst, _identity_residual(log))
        sessions += 1
        seed += 1
    assert worst <= 1e-9, f"identity residual {worst:.2e}"
    print(f"PASS fluency identity over {sessions} sessions, worst {worst:.2e}")


def test_replanning_robustness_hundred_sessions():
    policies = (
        HumanPolicy(PolicyKind.INDEPENDENT_PICKER, p_pick=0.5),
        HumanPolicy(PolicyKind.ERROR_PRONE, p_drop=0.1),
    )
    pairs = [(name, seed) for seed in range(13) for name in FURNITURE]
    sessions = 0
    replans = 0
    for policy in policies:
        for name, seed in pairs[:50]:
            log = run(Scenario(domain=name, seed=seed, policy=policy))
            assert log.goal_reached, (name, seed, policy.kind)
            report = replay(log)
            assert report.violations == [], (name, seed, report.violations)
            assert report.ok, (name, seed, report.mismatch)
            replans += len(log.of_kind("replan")) - 1  # first plan is not a replan
            sessions += 1
    assert sessions == 100
    print(f"PASS {sessions} perturbed sessions reached goal cleanly "
          f"({replans} replans)")


# -- criterion 7: determinism and exact replay ------------------------


def test_determinism_and_exact_replay():
    scenarios = [
        Scenario(domain=name, seed=3, policy=HumanPolicy(PolicyKind.COMPLIANT))
        for name in FURNITURE
    ]
    scenarios += [
        Scenario(
            domain=name,
            seed=9,
            policy=HumanPolicy(PolicyKind.INDEPENDENT_PICKER, p_pick=0.5),
        )
        for name in FURNITURE
    ]
    scenarios.append(Scenario(domain="hand_over_micro", seed=5))
    for scenario in scenarios:
        first = run(scenario).dump()
        second = run(replace(scenario)).dump()
        assert first == second, scenario.domain
        log = EventLog.parse(first)
        report = replay(log)
        assert report.ok and report.mismatch is None, scenario.domain
    print(f"PASS determinism and replay on {len(scenarios)} scenarios")


# -- criterion 8: default fluency profile calibration -----------------


def test_default_profile_calibration():
    rows = []
    for name in FURNITURE:
        log = run(Scenario(domain=name, seed=42, policy=HumanPolicy(PolicyKind.COMPLIANT)))
        rows.append(fluency(build_timeline(log)))
    means = {
        "human_idle": statistics.fmean(r.human_idle for r in rows),
        "robot_idle": statistics.fmean(r.robot_idle for r in rows),
        "functional_delay": statistics.fmean(r.functional_delay for r in rows),
        "concurrent_activity": statistics.fmean(r.concurrent_activity for r in rows),
    }
    for key, target in PROFILE_TARGETS.items():
        assert abs(means[key] - target) <= PROFILE_BAND_PP, (
            key,
            means[key],
            target,
        )
    others = (
        means["human_idle"],
        means["concurrent_activity"],
        means["functional_delay"],
    )
    assert means["robot_idle"] > max(others), means
    line = ", ".join(f"{k} {v:.2f}" for k, v in means.items())
    print(f"PASS profile calibration: {line}")


# -- criterion 9: domain-language serialization fixed point -----------


def _fuzz_source(rng: random.Random, index: int) -> str:
    regions = [f"zone{c}" for c in "abc"[: rng.randrange(1, 4)]]
    objects = [f"obj{c}" for c in "xyz"[: rng.randrange(0, 4)]]
    hidden = rng.randrange(len(regions))
    lines = [f'domain "fuzz_{index}" {{', "  regions {"]
    for i, region in enumerate(regions):
        tag = " hidden" if i == hidden and len(regions) > 1 else ""
        lines.append(f"    {region} ({float(i)}, 0.0, {float(i) + 1.0}, 1.0){tag}")
    lines.append("  }")
    lines.append("  agents {")
    lines.append(
        "    bot robot caps [grasp, release, move, perceive, wait] "
        f"reach [{', '.join(regions)}] effectors [g]"
    )
    lines.append("  }")
    if objects:
        lines.append("  objects {")
        for i, obj in enumerate(objects):
            region = regions[i % len(regions)]
            x = round(rng.uniform(0.05, 0.95) + regions.index(region), 3)
            y = round(rng.uniform(0.05, 0.95), 3)
            suffix = ""
            if rng.random() < 0.4:
                suffix = f" kind container content {rng.randrange(1, 4)}"
            lines.append(f"    {obj} at {region} ({x}, {y}){suffix}")
        lines.append("  }")
    lines.append("  goal tour()")
    if objects and rng.random() < 0.5:
        lines.append(f"  method tour() pre [not grasped({objects[0]})] {{")
    else:
        lines.append("  method tour() {")
    for region in regions:
        lines.append(f"    move(bot, g, {region});")
    if objects and rng.random() < 0.5:
        lines.append(f"    move(bot, g, {objects[0]});")
    lines.append("  }")
    if rng.random() < 0.5:
        lines.append("  method tour() {")
        lines.append(f"    move(bot, g, {regions[-1]});")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def test_domain_language_serialize_fixed_point():
    sources = [load_bundled(name) for name in BUNDLED_DOMAINS]
    checked = 0
    for domain in sources:
        once = serialize(domain)
        again = serialize(parse(once))
        assert once == again, domain.name
        checked += 1
    rng = random.Random(424242)
    for index in range(60):
        source = _fuzz_source(rng, index)
        domain = parse(DomainSource(source, origin=f"fuzz_{index}"))
        once = serialize(domain)
        assert parse(once) == domain
        assert serialize(parse(once)) == once
        checked += 1
    print(f"PASS serialization fixed point on {checked} sources")
