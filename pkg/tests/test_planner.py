import pytest

from coplan.actions import ActionTemplate, PerceiveKind
from coplan.planner import (
    Domain,
    DomainError,
    Method,
    Plan,
    PlanningError,
    Predicate,
    TargetRef,
    TaskCall,
    eval_predicate,
    explain,
    plan,
    replan,
    validate,
)
from coplan.state import (
    AgentDecl,
    AgentKind,
    EntityDeclarations,
    FeatureFamily,
    Location,
    ObjectDecl,
    Region,
    new_state,
)


def bench_decl() -> EntityDeclarations:
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
            ObjectDecl("part_a", Location("robot_ws", (0.2, 0.2))),
            ObjectDecl("part_b", Location("robot_ws", (0.6, 0.2))),
        ),
    )


def fetch_domain() -> Domain:
    decl = bench_decl()
    deliver = (
        Method("deliver", ("o",), (Predicate("at", ("o", "shared_ws")),), ()),
        Method(
            "deliver",
            ("o",),
            (),
            (
                TaskCall("perceive", ("check_available_objects",)),
                TaskCall("move", ("R", "r", "o")),
                TaskCall("grasp", ("R", "r", "o")),
                TaskCall("move", ("R", "r", "shared_ws")),
                TaskCall("release", ("R", "r", "o")),
            ),
        ),
    )
    deliver_all = (
        Method(
            "deliver_all",
            (),
            (),
            (TaskCall("deliver", ("part_a",)), TaskCall("deliver", ("part_b",))),
        ),
    )
    return Domain(
        name="bench",
        declarations=decl,
        methods={"deliver": deliver, "deliver_all": deliver_all},
        goal=TaskCall("deliver_all"),
    )


def test_plan_basic_decomposition():
    d = fetch_domain()
    p = plan(d, new_state(d.declarations))
    assert len(p) == 10
    templates = [a.template for a in p.steps]
    assert templates[:5] == [
        ActionTemplate.PERCEIVE,
        ActionTemplate.MOVE,
        ActionTemplate.GRASP,
        ActionTemplate.MOVE,
        ActionTemplate.RELEASE,
    ]
    assert p.steps[0].perceive_kind is PerceiveKind.CHECK_AVAILABLE_OBJECTS
    assert p.steps[0].agent == "R"  # default agent for perceive
    assert p.steps[2].object == "part_a"
    assert p.steps[7].object == "part_b"


def test_plan_is_deterministic():
    d = fetch_domain()
    s = new_state(d.declarations)
    assert plan(d, s) == plan(d, s)


def test_plan_validates():
    d = fetch_domain()
    s = new_state(d.declarations)
    p = plan(d, s)
    assert validate(p, s, d).ok


def test_validate_catches_reordered_steps():
    d = fetch_domain()
    s = new_state(d.declarations)
    p = plan(d, s)
    steps = list(p.steps)
    steps[1], steps[2] = steps[2], steps[1]  # grasp before move
    bad = Plan(steps=tuple(steps), trace=p.trace)
    result = validate(bad, s, d)
    assert not result.ok
    assert result.failed_index == 1
    fams = result.verdict.families()
    assert FeatureFamily.AGENT_POSE in fams or FeatureFamily.OBJECT_POSE in fams


def test_validate_empty_plan_ok():
    d = fetch_domain()
    s = new_state(d.declarations)
    assert validate(Plan((), ()), s, d).ok


def test_method_precondition_shortens_replan():
    d = fetch_domain()
    s = new_state(d.declarations)
    # the human already moved part_a to the shared bench
    moved = type(s)(
        effector_free=dict(s.effector_free),
        agent_poses=dict(s.agent_poses),
        object_poses=s.object_poses
        | {"part_a": type(s.object_poses["part_a"])(Location("shared_ws", (1.5, 0.5)))},
        object_traits=dict(s.object_traits),
    )
    p = replan(d, moved)
    assert len(p) == 5
    assert all(a.object != "part_a" for a in p.steps if a.object)
    assert validate(p, moved, d).ok


def test_replan_from_goal_state_is_empty():
    d = fetch_domain()
    s = new_state(d.declarations)
    done = type(s)(
        effector_free=dict(s.effector_free),
        agent_poses=dict(s.agent_poses),
        object_poses={
            "part_a": type(s.object_poses["part_a"])(Location("shared_ws", (1.4, 0.5))),
            "part_b": type(s.object_poses["part_b"])(Location("shared_ws", (1.6, 0.5))),
        },
        object_traits=dict(s.object_traits),
    )
    assert len(replan(d, done)) == 0


def test_document_order_backtracking():
    decl = bench_decl()
    # first method dead-ends (grasp far away); planner must fall through
    methods = {
        "get": (
            Method("get", ("o",), (), (TaskCall("grasp", ("R", "r", "o")),)),
            Method(
                "get",
                ("o",),
                (),
                (TaskCall("move", ("R", "r", "o")), TaskCall("grasp", ("R", "r", "o"))),
            ),
        )
    }
    d = Domain("bt", decl, methods, TaskCall("get", ("part_a",)))
    p = plan(d, new_state(decl))
    assert [a.template for a in p.steps] == [ActionTemplate.MOVE, ActionTemplate.GRASP]


def test_dead_end_reports_deepest_frontier():
    decl = bench_decl()
    methods = {
        "both": (
            Method(
                "both",
                (),
                (),
                (
                    TaskCall("move", ("R", "r", "part_a")),
                    TaskCall("grasp", ("R", "r", "part_a")),
                    TaskCall("move", ("R", "r", "part_b")),
                    TaskCall("grasp", ("R", "r", "part_b")),
                ),
            ),
        )
    }
    d = Domain("dead", decl, methods, TaskCall("both"))
    with pytest.raises(PlanningError) as err:
        plan(d, new_state(decl))
    assert err.value.step_index == 3
    assert "grasp" in str(err.value)
    assert FeatureFamily.EFFECTORS in err.value.verdict.families()


def test_unreachable_move_fails_with_reach_note():
    decl = bench_decl()
    methods = {
        "go": (Method("go", (), (), (TaskCall("move", ("R", "r", "human_ws")),)),)
    }
    d = Domain("far", decl, methods, TaskCall("go"))
    with pytest.raises(PlanningError) as err:
        plan(d, new_state(decl))
    assert "reach" in str(err.value)


def test_depth_cap():
    decl = bench_decl()
    methods = {"loop": (Method("loop", (), (), (TaskCall("loop"),)),)}
    d = Domain("loop", decl, methods, TaskCall("loop"))
    with pytest.raises(PlanningError, match="depth"):
        plan(d, new_state(decl))


def test_missing_method_is_domain_error():
    decl = bench_decl()
    d = Domain("none", decl, {}, TaskCall("ghost"))
    with pytest.raises(DomainError, match="ghost"):
        plan(d, new_state(decl))


def test_capability_respected_via_backtracking():
    decl = bench_decl()
    # robot branch is tried first but robots cannot manipulate
    methods = {
        "attach": (
            Method(
                "attach", (), (), (TaskCall("manipulate", ("R", "part_a", "fasten")),)
            ),
            Method(
                "attach",
                (),
                (),
                (
                    TaskCall("move", ("H", "right", "shared_ws")),
                    TaskCall("manipulate", ("H", "right", "part_a", "fasten")),
                ),
            ),
        )
    }
    # part_a must sit in a region both agents share
    objects = (
        ObjectDecl("part_a", Location("shared_ws", (1.5, 0.5))),
        ObjectDecl("part_b", Location("robot_ws", (0.6, 0.2))),
    )
    decl = EntityDeclarations(decl.regions, decl.agents, objects)
    d = Domain("caps", decl, methods, TaskCall("attach"))
    p = plan(d, new_state(decl))
    assert [a.agent for a in p.steps] == ["H", "H"]


def test_move_target_literal_coords():
    decl = bench_decl()
    methods = {
        "park": (
            Method(
                "park",
                (),
                (),
                (TaskCall("move", ("R", "r", TargetRef("shared_ws", (1.25, 0.75)))),),
            ),
        )
    }
    d = Domain("park", decl, methods, TaskCall("park"))
    p = plan(d, new_state(decl))
    assert p.steps[0].target == Location("shared_ws", (1.25, 0.75))


def test_explain_tree_matches_plan():
    d = fetch_domain()
    s = new_state(d.declarations)
    p = plan(d, s)
    tree = explain(p)
    assert tree.task == TaskCall("deliver_all")
    assert tree.method_label == "deliver_all[0]"
    leaves = tree.leaves()
    assert [n.action for n in leaves] == list(p.steps)
    # both deliver children used the fetch method (index 1)
    assert [c.method_label for c in tree.children] == ["deliver[1]", "deliver[1]"]


def test_explain_single_primitive_goal():
    decl = bench_decl()
    d = Domain("one", decl, {}, TaskCall("wait", ("pull_signal",)))
    p = plan(d, new_state(decl))
    assert len(p) == 1
    tree = explain(p)
    assert tree.leaf
    assert len(tree.leaves()) == 1


def test_plan_export_records():
    d = fetch_domain()
    p = plan(d, new_state(d.declarations))
    records = p.export()
    assert [r["index"] for r in records] == list(range(10))
    assert records[1]["template"] == "move"
    assert records[1]["target"]["region"] == "robot_ws"


def test_eval_predicate_registry():
    decl = bench_decl()
    s = new_state(decl)
    assert eval_predicate(Predicate("at", ("part_a", "robot_ws")), s, decl)
    assert not eval_predicate(Predicate("assembled", ("part_a",)), s, decl)
    assert eval_predicate(Predicate("assembled", ("part_a",), negated=True), s, decl)
    assert eval_predicate(Predicate("free", ("R", "r")), s, decl)
    assert not eval_predicate(Predicate("grasped", ("part_a",)), s, decl)
    with pytest.raises(DomainError):
        eval_predicate(Predicate("sideways", ("part_a",)), s, decl)
    with pytest.raises(DomainError):
        eval_predicate(Predicate("at", ("part_a", "nowhere")), s, decl)
