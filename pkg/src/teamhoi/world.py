"""World state shared by the reward stack, the environment, and the metrics:
planar agents with two 3D hands, the quasi-static table, and the target.

Everything is expressed in the world frame; the table's own geometry lives in
:class:`teamhoi.geometry.TableGeometry` (table frame) and is positioned by
``TableState``. Scene files and trajectory dumps are plain JSON views of these
dataclasses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import TableGeometry, TableSpec

SHOULDER_HEIGHT = 1.3
HAND_REACH = 0.9
HAND_Z_MIN = 0.3
HAND_Z_MAX = 1.4
TABLE_Z_MIN = 0.82
TABLE_Z_MAX = 1.2


def rot2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def heading_vector(theta: float) -> np.ndarray:
    return np.array([np.cos(theta), np.sin(theta)])


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]; in-range values pass through bit-identically."""
    if -np.pi < a <= np.pi:
        return float(a)
    w = (-a + np.pi) % (2.0 * np.pi)
    return float(np.pi - w)


@dataclass
class AgentState:
    root: np.ndarray  # (2,) m
    heading: float  # rad
    root_vel: np.ndarray = field(default_factory=lambda: np.zeros(2))
    heading_rate: float = 0.0
    hands: np.ndarray = field(default_factory=lambda: np.zeros((2, 3)))  # [L, R]
    hand_vels: np.ndarray = field(default_factory=lambda: np.zeros((2, 3)))

    def __post_init__(self):
        self.root = np.asarray(self.root, dtype=float).reshape(2)
        self.root_vel = np.asarray(self.root_vel, dtype=float).reshape(2)
        self.hands = np.asarray(self.hands, dtype=float).reshape(2, 3)
        self.hand_vels = np.asarray(self.hand_vels, dtype=float).reshape(2, 3)
        self.heading = float(self.heading)
        self.heading_rate = float(self.heading_rate)

    @property
    def root3d(self) -> np.ndarray:
        return np.array([self.root[0], self.root[1], SHOULDER_HEIGHT])

    @property
    def facing(self) -> np.ndarray:
        return heading_vector(self.heading)

    def copy(self) -> "AgentState":
        # bypasses __init__ validation; snapshotting is a hot path
        a = object.__new__(AgentState)
        a.root = self.root.copy()
        a.heading = self.heading
        a.root_vel = self.root_vel.copy()
        a.heading_rate = self.heading_rate
        a.hands = self.hands.copy()
        a.hand_vels = self.hand_vels.copy()
        return a

    def to_dict(self) -> dict:
        return {
            "root": self.root.tolist(),
            "heading": self.heading,
            "root_vel": self.root_vel.tolist(),
            "heading_rate": self.heading_rate,
            "hands": self.hands.tolist(),
            "hand_vels": self.hand_vels.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AgentState":
        return cls(
            root=d["root"],
            heading=d["heading"],
            root_vel=d.get("root_vel", (0.0, 0.0)),
            heading_rate=d.get("heading_rate", 0.0),
            hands=d.get("hands", np.zeros((2, 3))),
            hand_vels=d.get("hand_vels", np.zeros((2, 3))),
        )


@dataclass
class TableState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(2))
    yaw: float = 0.0
    z: float = TABLE_Z_MIN
    planar_vel: np.ndarray = field(default_factory=lambda: np.zeros(2))
    yaw_rate: float = 0.0
    gripped: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(2)
        self.planar_vel = np.asarray(self.planar_vel, dtype=float).reshape(2)
        self.yaw = float(self.yaw)
        self.z = float(self.z)
        self.yaw_rate = float(self.yaw_rate)

    def copy(self) -> "TableState":
        t = object.__new__(TableState)
        t.position = self.position.copy()
        t.yaw = self.yaw
        t.z = self.z
        t.planar_vel = self.planar_vel.copy()
        t.yaw_rate = self.yaw_rate
        t.gripped = self.gripped
        return t

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "yaw": self.yaw,
            "z": self.z,
            "planar_vel": self.planar_vel.tolist(),
            "yaw_rate": self.yaw_rate,
            "gripped": self.gripped,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TableState":
        return cls(
            position=d.get("position", (0.0, 0.0)),
            yaw=d.get("yaw", 0.0),
            z=d.get("z", TABLE_Z_MIN),
            planar_vel=d.get("planar_vel", (0.0, 0.0)),
            yaw_rate=d.get("yaw_rate", 0.0),
            gripped=d.get("gripped", False),
        )


@dataclass
class WorldState:
    """Single source of truth for reward evaluation: all agents, the table
    pose, its (table-frame) geometry, and the transport target."""

    agents: list
    table: TableState
    geometry: TableGeometry
    target: np.ndarray  # (2,)
    t: int = 0

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float).reshape(2)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def copy(self) -> "WorldState":
        w = object.__new__(WorldState)
        w.agents = [a.copy() for a in self.agents]
        w.table = self.table.copy()
        w.geometry = self.geometry
        w.target = self.target.copy()
        w.t = self.t
        return w

    # world-frame views of the table-frame geometry

    def contact_points_world(self) -> np.ndarray:
        """(n_contact, 3) contact points on the lower tabletop edge, at the
        table's current pose and height. Memoized per pose; treat the result
        as read-only."""
        key = (self.table.position[0], self.table.position[1],
               self.table.yaw, self.table.z)
        cached = getattr(self, "_cpw_cache", None)
        if cached is not None and cached[0] == key:
            return cached[1]
        pts = self.geometry.sampling.points @ rot2(self.table.yaw).T + self.table.position
        z = np.full((len(pts), 1), self.table.z)
        out = np.concatenate([pts, z], axis=1)
        self._cpw_cache = (key, out)
        return out

    def inward_normals_world(self) -> np.ndarray:
        return self.geometry.sampling.inward_normals @ rot2(self.table.yaw).T

    def table_center(self) -> np.ndarray:
        """World-frame planar COM of the tabletop mass distribution."""
        return rot2(self.table.yaw) @ self.geometry.frame.com + self.table.position

    def roots_table_frame(self) -> np.ndarray:
        roots = np.stack([a.root for a in self.agents])
        return (roots - self.table.position) @ rot2(self.table.yaw)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "agents": [a.to_dict() for a in self.agents],
            "table": self.table.to_dict(),
            "target": self.target.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, geometry: TableGeometry) -> "WorldState":
        return cls(
            agents=[AgentState.from_dict(a) for a in d["agents"]],
            table=TableState.from_dict(d.get("table", {})),
            geometry=geometry,
            target=d["target"],
            t=d.get("t", 0),
        )


class SceneError(ValueError):
    """Raised for malformed scene documents; the message names the field."""


def load_scene(path) -> WorldState:
    """Load a static scene: {"table": TableSpec..., "table_state": {...}?,
    "target": [x, y], "agents": [{root, heading, hands?, ...}]}."""
    with open(path) as f:
        doc = json.load(f)
    return scene_from_dict(doc)


def scene_from_dict(doc: dict) -> WorldState:
    known = {"table", "table_state", "target", "agents"}
    unknown = set(doc) - known
    if unknown:
        raise SceneError(f"unknown scene fields: {sorted(unknown)}")
    for key in ("table", "target", "agents"):
        if key not in doc:
            raise SceneError(f"scene is missing required field {key!r}")
    try:
        spec = TableSpec.from_dict(doc["table"])
    except (TypeError, ValueError) as e:
        raise SceneError(f"table: {e}") from e
    geometry = TableGeometry(spec)
    if not doc["agents"]:
        raise SceneError("agents: need at least one agent")
    agents = []
    for i, a in enumerate(doc["agents"]):
        unknown = set(a) - {"root", "heading", "root_vel", "heading_rate",
                            "hands", "hand_vels"}
        if unknown:
            raise SceneError(f"agents[{i}]: unknown fields {sorted(unknown)}")
        if "root" not in a or "heading" not in a:
            raise SceneError(f"agents[{i}]: root and heading are required")
        if "hands" not in a:
            a = dict(a)
            a["hands"] = _default_hands(np.asarray(a["root"], dtype=float),
                                        float(a["heading"]))
        try:
            agents.append(AgentState.from_dict(a))
        except (TypeError, ValueError) as e:
            raise SceneError(f"agents[{i}]: {e}") from e
    table_state = TableState.from_dict(doc.get("table_state", {}))
    try:
        target = np.asarray(doc["target"], dtype=float).reshape(2)
    except ValueError as e:
        raise SceneError(f"target: {e}") from e
    return WorldState(agents=agents, table=table_state, geometry=geometry,
                      target=target)


def _default_hands(root: np.ndarray, heading: float) -> np.ndarray:
    """Relaxed standing hands: slightly forward, shoulder-width apart."""
    r = rot2(heading)
    left = root + r @ np.array([0.25, 0.25])
    right = root + r @ np.array([0.25, -0.25])
    return np.array([[left[0], left[1], 0.9], [right[0], right[1], 0.9]])


def dump_trajectory(states, path) -> None:
    """Write one JSON line per WorldState snapshot, preceded by a header line
    carrying the table spec."""
    with open(path, "w") as f:
        if states:
            f.write(json.dumps({"table_spec": states[0].geometry.spec.to_dict()}) + "\n")
        for s in states:
            f.write(json.dumps(s.to_dict()) + "\n")


def load_trajectory(path):
    """Read a trajectory dump back into WorldState snapshots."""
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or "table_spec" not in lines[0]:
        raise SceneError("trajectory file is missing its table_spec header line")
    geometry = TableGeometry(TableSpec.from_dict(lines[0]["table_spec"]))
    return [WorldState.from_dict(d, geometry) for d in lines[1:]]
