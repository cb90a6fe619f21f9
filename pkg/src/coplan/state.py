"""Interaction state shared by a robot and a human working at a tabletop.

The state tracks four feature families: which end-effectors are free,
where each agent's effectors are, where each object is, and the per-object
trait set (holders, assembled flag, container content). All values are
immutable; every update produces a new state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

AgentId = str
EffectorId = str
ObjectId = str
RegionId = str

EffectorRef = tuple[AgentId, EffectorId]


class DeclarationError(ValueError):
    """Raised for malformed or inconsistent entity declarations."""


class StateError(ValueError):
    """Raised when a state operation receives incompatible inputs."""


class AgentKind(Enum):
    ROBOT = "robot"
    HUMAN = "human"


class FeatureFamily(Enum):
    """The four observable feature families of the interaction state."""

    EFFECTORS = "effectors"
    AGENT_POSE = "agent_pose"
    OBJECT_POSE = "object_pose"
    OBJECT_TRAITS = "object_traits"


@dataclass(frozen=True)
class Region:
    """Named workspace area with an axis-aligned bounding box in meters."""

    name: RegionId
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    visible: bool = True  # covered by the overhead marker camera

    def __post_init__(self) -> None:
        xmin, ymin, xmax, ymax = self.bounds
        if xmax <= xmin or ymax <= ymin:
            raise DeclarationError(f"region {self.name!r} has an empty bounding box")

    def contains(self, coords: tuple[float, float]) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        x, y = coords
        return xmin <= x <= xmax and ymin <= y <= ymax

    @property
    def center(self) -> tuple[float, float]:
        xmin, ymin, xmax, ymax = self.bounds
        return ((xmin + xmax) / 2.0, (ymin + ymax) / 2.0)

    def clamp(self, coords: tuple[float, float]) -> tuple[float, float]:
        xmin, ymin, xmax, ymax = self.bounds
        return (min(max(coords[0], xmin), xmax), min(max(coords[1], ymin), ymax))


@dataclass(frozen=True)
class Location:
    """A point in the world frame, tagged with the region it lies in."""

    region: RegionId
    coords: tuple[float, float]


@dataclass(frozen=True)
class AgentDecl:
    name: AgentId
    kind: AgentKind
    effectors: tuple[EffectorId, ...]
    reach: frozenset[RegionId]
    capabilities: frozenset[str]  # action template names, validated upstream

    def __post_init__(self) -> None:
        if not self.effectors:
            raise DeclarationError(f"agent {self.name!r} declares no effectors")
        if len(set(self.effectors)) != len(self.effectors):
            raise DeclarationError(f"agent {self.name!r} has duplicate effectors")


@dataclass(frozen=True)
class ObjectDecl:
    name: ObjectId
    location: Location
    kind: str = "component"
    content: int | None = None

    def __post_init__(self) -> None:
        if self.content is not None and self.content < 0:
            raise DeclarationError(f"object {self.name!r} has negative content")


@dataclass(frozen=True)
class EntityDeclarations:
    """Everything a scenario declares: regions, agents and objects."""

    regions: tuple[Region, ...]
    agents: tuple[AgentDecl, ...]
    objects: tuple[ObjectDecl, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for name in (
            [r.name for r in self.regions]
            + [a.name for a in self.agents]
            + [o.name for o in self.objects]
        ):
            if name in seen:
                raise DeclarationError(f"duplicate identifier {name!r}")
            seen.add(name)
        region_names = {r.name for r in self.regions}
        for agent in self.agents:
            missing = agent.reach - region_names
            if missing:
                raise DeclarationError(
                    f"agent {agent.name!r} reaches undeclared region(s) {sorted(missing)}"
                )
        for obj in self.objects:
            region = self.region_map.get(obj.location.region)
            if region is None:
                raise DeclarationError(
                    f"object {obj.name!r} placed in undeclared region {obj.location.region!r}"
                )
            if not region.contains(obj.location.coords):
                raise DeclarationError(
                    f"object {obj.name!r} coords {obj.location.coords} outside {region.name!r}"
                )

    @property
    def region_map(self) -> dict[RegionId, Region]:
        return {r.name: r for r in self.regions}

    @property
    def agent_map(self) -> dict[AgentId, AgentDecl]:
        return {a.name: a for a in self.agents}

    @property
    def object_map(self) -> dict[ObjectId, ObjectDecl]:
        return {o.name: o for o in self.objects}

    def effector_refs(self) -> tuple[EffectorRef, ...]:
        return tuple((a.name, e) for a in self.agents for e in a.effectors)

    def agent(self, name: AgentId) -> AgentDecl:
        try:
            return self.agent_map[name]
        except KeyError:
            raise DeclarationError(f"undeclared agent {name!r}") from None

    def region(self, name: RegionId) -> Region:
        try:
            return self.region_map[name]
        except KeyError:
            raise DeclarationError(f"undeclared region {name!r}") from None

    def object(self, name: ObjectId) -> ObjectDecl:
        try:
            return self.object_map[name]
        except KeyError:
            raise DeclarationError(f"undeclared object {name!r}") from None

    def region_location(self, name: RegionId) -> Location:
        return Location(name, self.region(name).center)


@dataclass(frozen=True)
class AgentPose:
    """Effector placement and gripper opening for one agent.

    gripper_opening is normalized: 1.0 fully open, 0.0 closed on an object.
    """

    base: Location
    ee_pose: dict[EffectorId, Location]
    gripper_opening: dict[EffectorId, float]


@dataclass(frozen=True)
class ObjectPose:
    location: Location
    orientation: float | None = None  # yaw, normalized to (-pi, pi]
    internal_dof: float | None = None


@dataclass(frozen=True)
class ObjectTraits:
    """Open-ended per-object trait set."""

    grasped_by: frozenset[EffectorRef] = frozenset()
    assembled: bool = False
    content_count: int | None = None
    extras: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class InteractionState:
    """Immutable snapshot of the collaboration at one instant."""

    effector_free: dict[EffectorRef, bool]
    agent_poses: dict[AgentId, AgentPose]
    object_poses: dict[ObjectId, ObjectPose]
    object_traits: dict[ObjectId, ObjectTraits]
    clock: float = 0.0

    def held_object(self, agent: AgentId, effector: EffectorId) -> ObjectId | None:
        for obj, traits in self.object_traits.items():
            if (agent, effector) in traits.grasped_by:
                return obj
        return None

    def with_clock(self, clock: float) -> "InteractionState":
        return replace(self, clock=clock)


@dataclass(frozen=True)
class FeatureDiff:
    """Keys, per feature family, whose values differ between two states."""

    effectors: frozenset[EffectorRef] = frozenset()
    agent_poses: frozenset[AgentId] = frozenset()
    object_poses: frozenset[ObjectId] = frozenset()
    object_traits: frozenset[ObjectId] = frozenset()

    def families(self) -> frozenset[FeatureFamily]:
        touched = []
        if self.effectors:
            touched.append(FeatureFamily.EFFECTORS)
        if self.agent_poses:
            touched.append(FeatureFamily.AGENT_POSE)
        if self.object_poses:
            touched.append(FeatureFamily.OBJECT_POSE)
        if self.object_traits:
            touched.append(FeatureFamily.OBJECT_TRAITS)
        return frozenset(touched)

    @property
    def empty(self) -> bool:
        return not (
            self.effectors or self.agent_poses or self.object_poses or self.object_traits
        )


def normalize_yaw(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def new_state(decl: EntityDeclarations) -> InteractionState:
    """Build the start-of-session state: all effectors free, nothing grasped."""
    effector_free = {ref: True for ref in decl.effector_refs()}
    agent_poses: dict[AgentId, AgentPose] = {}
    for agent in decl.agents:
        home_region = sorted(agent.reach)[0] if agent.reach else decl.regions[0].name
        home = decl.region_location(home_region)
        agent_poses[agent.name] = AgentPose(
            base=home,
            ee_pose={e: home for e in agent.effectors},
            gripper_opening={e: 1.0 for e in agent.effectors},
        )
    object_poses = {o.name: ObjectPose(location=o.location) for o in decl.objects}
    object_traits = {
        o.name: ObjectTraits(content_count=o.content) for o in decl.objects
    }
    return InteractionState(
        effector_free=effector_free,
        agent_poses=agent_poses,
        object_poses=object_poses,
        object_traits=object_traits,
        clock=0.0,
    )


def diff(a: InteractionState, b: InteractionState) -> FeatureDiff:
    """Per-family sets of keys whose values differ. The clock is ignored."""
    if (
        a.effector_free.keys() != b.effector_free.keys()
        or a.agent_poses.keys() != b.agent_poses.keys()
        or a.object_poses.keys() != b.object_poses.keys()
        or a.object_traits.keys() != b.object_traits.keys()
    ):
        raise StateError("states declare different entity sets")
    return FeatureDiff(
        effectors=frozenset(
            k for k, v in a.effector_free.items() if b.effector_free[k] != v
        ),
        agent_poses=frozenset(
            k for k, v in a.agent_poses.items() if b.agent_poses[k] != v
        ),
        object_poses=frozenset(
            k for k, v in a.object_poses.items() if b.object_poses[k] != v
        ),
        object_traits=frozenset(
            k for k, v in a.object_traits.items() if b.object_traits[k] != v
        ),
    )


def reachable(agent: AgentId, loc: Location, decl: EntityDeclarations) -> bool:
    """True iff the location's region is in the agent's declared reach."""
    decl.region(loc.region)
    return loc.region in decl.agent(agent).reach


def check_state(state: InteractionState, decl: EntityDeclarations) -> None:
    """Assert the structural invariants; used by tests and the simulator."""
    expected_refs = set(decl.effector_refs())
    if set(state.effector_free) != expected_refs:
        raise StateError("effector availability keys do not match declarations")
    if set(state.agent_poses) != {a.name for a in decl.agents}:
        raise StateError("agent pose keys do not match declarations")
    object_names = {o.name for o in decl.objects}
    if set(state.object_poses) != object_names or set(state.object_traits) != object_names:
        raise StateError("object keys do not match declarations")

    holders: dict[EffectorRef, list[ObjectId]] = {}
    kinds = {a.name: a.kind for a in decl.agents}
    for obj, traits in state.object_traits.items():
        if len(traits.grasped_by) > 2:
            raise StateError(f"{obj!r} has more than two holders")
        if len(traits.grasped_by) == 2:
            agent_kinds = {kinds[a] for a, _ in traits.grasped_by}
            if agent_kinds != {AgentKind.ROBOT, AgentKind.HUMAN}:
                raise StateError(f"{obj!r} double-held outside a robot-human handover")
        if traits.content_count is not None and traits.content_count < 0:
            raise StateError(f"{obj!r} has negative content")
        for ref in traits.grasped_by:
            holders.setdefault(ref, []).append(obj)
    for ref, free in state.effector_free.items():
        held = holders.get(ref, [])
        if len(held) > 1:
            raise StateError(f"effector {ref} holds more than one object: {held}")
        if free and held:
            raise StateError(f"effector {ref} marked free but holds {held[0]!r}")
        if not free and not held:
            raise StateError(f"effector {ref} marked busy but holds nothing")
    for obj, pose in state.object_poses.items():
        region = decl.region(pose.location.region)
        if not region.contains(pose.location.coords):
            raise StateError(f"{obj!r} lies outside its region {region.name!r}")
        if pose.orientation is not None and not (
            -math.pi < pose.orientation <= math.pi
        ):
            raise StateError(f"{obj!r} orientation not normalized")
