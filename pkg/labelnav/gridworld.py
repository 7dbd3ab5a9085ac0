"""
Deterministic 2-D grid navigation environment.

Cells are addressed (x, y) with y growing southwards; heading 0 faces north.
The agent sees objects inside a forward cone with line of sight, and an
episode succeeds when it issues Done while an instance of the target class is
in view within the success distance.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from labelnav.config import WorldConfig
from labelnav.errors import InvalidActionError, SceneGenerationError

logger = logging.getLogger(__name__)


class Action(IntEnum):
    MOVE_AHEAD = 0
    ROTATE_LEFT = 1
    ROTATE_RIGHT = 2
    LOOK_UP = 3
    LOOK_DOWN = 4
    DONE = 5


ACTION_NAMES = ('MoveAhead', 'RotateLeft', 'RotateRight', 'LookUp', 'LookDown', 'Done')
NUM_ACTIONS = len(ACTION_NAMES)

HEADINGS = (0, 90, 180, 270)
PITCHES = (-30, 0, 30)
HEADING_VECTORS = {0: (0, -1), 90: (1, 0), 180: (0, 1), 270: (-1, 0)}

SPLIT_NAMES = ('known', 'unknown', 'unseen')

ATTRIBUTE_VOCABULARY = (
    'small', 'big', 'metal', 'plastic', 'glass', 'ceramic', 'wood', 'fabric',
    'paper', 'pickupable', 'receptacle', 'openable', 'electronic', 'soft',
    'breakable', 'cookware',
)

# (name, attributes) in split order: known classes first, then unknown, then unseen
CLASS_CATALOG = (
    ('Mug', ('small', 'ceramic', 'pickupable', 'receptacle', 'breakable')),
    ('Laptop', ('small', 'metal', 'plastic', 'electronic', 'openable', 'pickupable')),
    ('Sofa', ('big', 'fabric', 'soft', 'wood')),
    ('Fridge', ('big', 'metal', 'electronic', 'openable', 'receptacle')),
    ('Lamp', ('small', 'metal', 'glass', 'electronic')),
    ('Book', ('small', 'paper', 'pickupable', 'openable')),
    ('Bathtub', ('big', 'ceramic', 'receptacle')),
    ('Phone', ('small', 'plastic', 'glass', 'electronic', 'pickupable')),
    ('Vase', ('small', 'glass', 'breakable', 'receptacle')),
    ('Pan', ('small', 'metal', 'cookware', 'pickupable', 'receptacle')),
    ('Bed', ('big', 'wood', 'fabric', 'soft')),
    ('Television', ('big', 'plastic', 'glass', 'electronic')),
    ('Kettle', ('small', 'metal', 'cookware', 'electronic', 'receptacle')),
    ('Pillow', ('small', 'fabric', 'soft', 'pickupable')),
    ('Cabinet', ('big', 'wood', 'openable', 'receptacle')),
    ('Toaster', ('small', 'metal', 'cookware', 'electronic')),
)


@dataclass(frozen=True)
class ClassSplit:
    """Known, unknown and unseen class ids with per-class names and attributes."""
    known: Tuple[int, ...]
    unknown: Tuple[int, ...]
    unseen: Tuple[int, ...]
    names: Tuple[str, ...]
    attributes: Tuple[Tuple[str, ...], ...]

    def __post_init__(self):
        sets = [set(self.known), set(self.unknown), set(self.unseen)]
        if any(len(s) == 0 for s in sets):
            raise ValueError("Every split needs at least one class")
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("Known, unknown and unseen classes must not intersect")
        for c in self.all_classes:
            if not 0 <= c < len(self.names) or c >= len(self.attributes):
                raise ValueError(f"Class {c} has no name or attributes")
            if not self.attributes[c]:
                raise ValueError(f"Class {c} has an empty attribute set")

    @property
    def all_classes(self) -> Tuple[int, ...]:
        return self.known + self.unknown + self.unseen

    def split_of(self, class_id: int) -> str:
        if class_id in self.known:
            return 'known'
        if class_id in self.unknown:
            return 'unknown'
        if class_id in self.unseen:
            return 'unseen'
        raise KeyError(f"Class {class_id} is not in the split")

    def is_unlabeled(self, class_id: int) -> bool:
        return self.split_of(class_id) != 'known'

    def known_index(self, class_id: int) -> int:
        return self.known.index(class_id)

    def size_of(self, class_id: int) -> str:
        return 'small' if 'small' in self.attributes[class_id] else 'big'


def default_split(known: int = 6, unknown: int = 3, unseen: int = 2) -> ClassSplit:
    """Take consecutive classes from the catalog for each split."""
    total = known + unknown + unseen
    if total > len(CLASS_CATALOG):
        raise ValueError(f"The class catalog holds only {len(CLASS_CATALOG)} classes")
    catalog = CLASS_CATALOG[:total]
    return ClassSplit(
        known=tuple(range(known)),
        unknown=tuple(range(known, known + unknown)),
        unseen=tuple(range(known + unknown, total)),
        names=tuple(name for name, _ in catalog),
        attributes=tuple(attrs for _, attrs in catalog),
    )


@dataclass(frozen=True)
class AgentState:
    x: int
    y: int
    heading: int = 0
    pitch: int = 0


@dataclass(frozen=True)
class SceneObject:
    instance_id: int
    class_id: int
    x: int
    y: int
    size: str


@dataclass(frozen=True)
class Scene:
    scene_id: str
    width: int
    height: int
    walls: FrozenSet[Tuple[int, int]]
    objects: Tuple[SceneObject, ...]
    split: ClassSplit
    kind: str = 'train'
    seed: int = 0

    def inside(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, x: int, y: int) -> bool:
        return self.inside(x, y) and (x, y) not in self.walls

    def free_cells(self) -> List[Tuple[int, int]]:
        return [(x, y) for y in range(self.height) for x in range(self.width) if (x, y) not in self.walls]

    def classes_present(self) -> Tuple[int, ...]:
        return tuple(sorted({o.class_id for o in self.objects}))


@dataclass(frozen=True)
class Target:
    """Goal of an episode. class_id is ground truth; the agent sees only the attributes when unlabeled."""
    class_id: int
    attributes: Tuple[str, ...]
    unlabeled: bool


@dataclass(frozen=True)
class EpisodeSpec:
    episode_id: str
    scene_id: str
    start: AgentState
    target: Target
    max_steps: int
    shortest_path: int
    seed: int = 0


@dataclass(frozen=True)
class VisibleObject:
    instance_id: int
    class_id: int
    x: int
    y: int
    size: str
    distance: float
    bearing: float


@dataclass(frozen=True)
class ObservationFrame:
    scene_id: str
    state: AgentState
    visible: Tuple[VisibleObject, ...]
    gt: int = 0

    def find(self, instance_id: int) -> Optional[VisibleObject]:
        for v in self.visible:
            if v.instance_id == instance_id:
                return v
        return None

    def classes(self) -> Tuple[int, ...]:
        return tuple(sorted({v.class_id for v in self.visible}))


@dataclass(frozen=True)
class StepOutcome:
    state: AgentState
    terminal: bool
    collision: bool


def step(scene: Scene, state: AgentState, action: int) -> StepOutcome:
    """
    Apply one action.

    Raises:
        InvalidActionError: action id outside 0..5
    """
    try:
        action = Action(int(action))
    except ValueError:
        raise InvalidActionError(f"Unknown action id {action}")

    if action == Action.MOVE_AHEAD:
        dx, dy = HEADING_VECTORS[state.heading]
        nx, ny = state.x + dx, state.y + dy
        if not scene.is_free(nx, ny):
            return StepOutcome(state, False, True)
        return StepOutcome(AgentState(nx, ny, state.heading, state.pitch), False, False)
    if action == Action.ROTATE_LEFT:
        return StepOutcome(AgentState(state.x, state.y, (state.heading - 90) % 360, state.pitch), False, False)
    if action == Action.ROTATE_RIGHT:
        return StepOutcome(AgentState(state.x, state.y, (state.heading + 90) % 360, state.pitch), False, False)
    if action == Action.LOOK_UP:
        return StepOutcome(AgentState(state.x, state.y, state.heading, min(state.pitch + 30, PITCHES[-1])), False, False)
    if action == Action.LOOK_DOWN:
        return StepOutcome(AgentState(state.x, state.y, state.heading, max(state.pitch - 30, PITCHES[0])), False, False)
    return StepOutcome(state, True, False)


def relative_geometry(state: AgentState, x: int, y: int) -> Tuple[float, float, float, float]:
    """
    Egocentric offsets of cell (x, y).

    Returns:
        (right, forward, distance, bearing in degrees; positive to the right)
    """
    dx, dy = x - state.x, y - state.y
    fx, fy = HEADING_VECTORS[state.heading]
    rx, ry = HEADING_VECTORS[(state.heading + 90) % 360]
    forward = float(dx * fx + dy * fy)
    right = float(dx * rx + dy * ry)
    distance = math.hypot(dx, dy)
    bearing = math.degrees(math.atan2(right, forward)) if distance > 0 else 0.0
    return right, forward, distance, bearing


def line_of_sight(scene: Scene, x0: int, y0: int, x1: int, y1: int) -> bool:
    """Sample the segment between cell centres; any wall cell on it blocks the view."""
    length = math.hypot(x1 - x0, y1 - y0)
    samples = max(1, int(math.ceil(length * 8)))
    for k in range(1, samples):
        t = k / samples
        cx = int(math.floor(x0 + (x1 - x0) * t + 0.5))
        cy = int(math.floor(y0 + (y1 - y0) * t + 0.5))
        if (cx, cy) in scene.walls:
            return False
    return True


def observe(scene: Scene, state: AgentState, world: WorldConfig = WorldConfig()) -> ObservationFrame:
    """
    Objects inside the forward cone, within range and not hidden by walls.

    Small objects are hidden while the camera looks up.
    """
    half = world.view_aperture / 2.0
    visible = []
    for obj in scene.objects:
        _, _, distance, bearing = relative_geometry(state, obj.x, obj.y)
        if distance > world.view_range:
            continue
        if abs(bearing) > half + 1e-9:
            continue
        if obj.size == 'small' and state.pitch > 0:
            continue
        if not line_of_sight(scene, state.x, state.y, obj.x, obj.y):
            continue
        visible.append(VisibleObject(obj.instance_id, obj.class_id, obj.x, obj.y, obj.size,
                                     distance, bearing))
    visible.sort(key=lambda v: (v.distance, v.instance_id))
    gt = int(any(scene.split.is_unlabeled(v.class_id) for v in visible))
    return ObservationFrame(scene.scene_id, state, tuple(visible), gt)


def target_in_reach(frame: ObservationFrame, target: Target, world: WorldConfig = WorldConfig()) -> bool:
    return any(v.class_id == target.class_id and v.distance <= world.success_distance
               for v in frame.visible)


def success(scene: Scene, state: AgentState, target: Target, issued_done: bool, steps_used: int,
            world: WorldConfig = WorldConfig(), max_steps: Optional[int] = None) -> bool:
    """Done issued, target in view within the success distance, step cap respected."""
    cap = world.max_steps if max_steps is None else max_steps
    if not issued_done or steps_used > cap:
        return False
    return target_in_reach(observe(scene, state, world), target, world)


def all_states(scene: Scene) -> Iterator[AgentState]:
    for x, y in scene.free_cells():
        for h in HEADINGS:
            for p in PITCHES:
                yield AgentState(x, y, h, p)


def shortest_path_len(scene: Scene, start: AgentState, target: Target,
                      world: WorldConfig = WorldConfig()) -> Optional[int]:
    """
    Minimum number of actions, the final Done included, to finish successfully.

    Breadth-first search over (x, y, heading, pitch).

    Returns:
        step count, or None when no success-satisfying state is reachable
    """
    goal_cache: Dict[AgentState, bool] = {}

    def is_goal(s: AgentState) -> bool:
        if s not in goal_cache:
            goal_cache[s] = target_in_reach(observe(scene, s, world), target, world)
        return goal_cache[s]

    if is_goal(start):
        return 1
    seen = {start}
    queue = deque([(start, 0)])
    while queue:
        current, depth = queue.popleft()
        for action in (Action.MOVE_AHEAD, Action.ROTATE_LEFT, Action.ROTATE_RIGHT,
                       Action.LOOK_UP, Action.LOOK_DOWN):
            nxt = step(scene, current, action).state
            if nxt in seen:
                continue
            if is_goal(nxt):
                return depth + 2
            seen.add(nxt)
            queue.append((nxt, depth + 1))
    return None


def connected(width: int, height: int, walls: FrozenSet[Tuple[int, int]]) -> bool:
    """Flood fill: every free cell reachable from the first one."""
    free = [(x, y) for y in range(height) for x in range(width) if (x, y) not in walls]
    if not free:
        return False
    seen = {free[0]}
    queue = deque([free[0]])
    while queue:
        x, y = queue.popleft()
        for dx, dy in HEADING_VECTORS.values():
            n = (x + dx, y + dy)
            if 0 <= n[0] < width and 0 <= n[1] < height and n not in walls and n not in seen:
                seen.add(n)
                queue.append(n)
    return len(seen) == len(free)


def scene_classes(split: ClassSplit, kind: str) -> Tuple[int, ...]:
    """Training scenes hold known and unknown classes; val/test scenes hold all three."""
    if kind == 'train':
        return split.known + split.unknown
    return split.all_classes


def target_pool(split: ClassSplit, kind: str, which: Optional[str] = None) -> Tuple[int, ...]:
    """
    Classes an episode generator may draw targets from.

    Args:
        kind: 'train' draws from known and unknown only
        which: restrict to one split name ('known', 'unknown', 'unseen')
    """
    pool = scene_classes(split, kind)
    if which is not None:
        pool = tuple(c for c in pool if split.split_of(c) == which)
    return pool


def generate_scene(seed: int, width: int, height: int, split: ClassSplit, density: float,
                   kind: str = 'train') -> Scene:
    """
    Seeded scene with connected free space and one instance per class.

    Raises:
        SceneGenerationError: when the classes do not fit in the free cells
    """
    if kind not in ('train', 'val', 'test'):
        raise ValueError(f"Unknown scene kind '{kind}'")
    rng = np.random.default_rng([seed, width, height])
    cells = [(x, y) for y in range(height) for x in range(width)]
    wanted = int(round(density * width * height))

    walls = set()
    for idx in rng.permutation(len(cells)):
        if len(walls) >= wanted:
            break
        candidate = frozenset(walls | {cells[idx]})
        if connected(width, height, candidate):
            walls.add(cells[idx])
    walls = frozenset(walls)

    classes = scene_classes(split, kind)
    free = [c for c in cells if c not in walls]
    if len(classes) > len(free):
        raise SceneGenerationError(
            f"Cannot place {len(classes)} classes in {len(free)} free cells ({width}x{height}, density {density})")
    order = rng.permutation(len(free))
    objects = tuple(
        SceneObject(i, c, free[order[i]][0], free[order[i]][1], split.size_of(c))
        for i, c in enumerate(classes)
    )
    scene = Scene(f'{kind}-{seed}', width, height, walls, objects, split, kind, seed)
    logger.debug(f"Generated scene {scene.scene_id}: {len(walls)} walls, {len(objects)} objects")
    return scene


def generate_scenes(world: WorldConfig, split: ClassSplit) -> Dict[str, List[Scene]]:
    """Train, val and test scene sets with disjoint seeds."""
    counts = (('train', world.train_scenes), ('val', world.val_scenes), ('test', world.test_scenes))
    out = {}
    offset = world.seed * 100_000
    for k, (kind, count) in enumerate(counts):
        out[kind] = [
            generate_scene(offset + k * 10_000 + i, world.width, world.height, split, world.density, kind)
            for i in range(count)
        ]
    return out


def make_target(split: ClassSplit, class_id: int) -> Target:
    return Target(class_id, split.attributes[class_id], split.is_unlabeled(class_id))


def generate_episode(seed: int, scene: Scene, pool: Sequence[int],
                     world: WorldConfig = WorldConfig(), attempts: int = 100) -> EpisodeSpec:
    """
    Seeded start state and target drawn from the pool.

    Raises:
        SceneGenerationError: when no pool class is present or no start reaches the target
    """
    present = [c for c in pool if c in scene.classes_present()]
    if not present:
        raise SceneGenerationError(f"No target of the pool is present in scene {scene.scene_id}")
    rng = np.random.default_rng([seed, scene.seed, len(present)])
    free = scene.free_cells()
    target = make_target(scene.split, int(present[rng.integers(len(present))]))
    for _ in range(attempts):
        x, y = free[rng.integers(len(free))]
        start = AgentState(int(x), int(y), int(HEADINGS[rng.integers(4)]), int(PITCHES[rng.integers(3)]))
        shortest = shortest_path_len(scene, start, target, world)
        if shortest is not None:
            return EpisodeSpec(f'{scene.scene_id}/ep-{seed}', scene.scene_id, start, target,
                               world.max_steps, shortest, seed)
    raise SceneGenerationError(f"No reachable start found for class {target.class_id} in {scene.scene_id}")
