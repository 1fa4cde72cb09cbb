"""Domain types, agent-centric coordinate frames, and augmentation transforms.

Everything downstream (metrics, matching, losses, the predictor, the training
harness) trades in the types defined here. All types are immutable after
construction and all operations are pure functions, so unrestricted parallel
use is safe.

Conventions:
    - coordinates are meters in a flat 2-D plane, double precision throughout
    - trajectories are (N, 2) arrays of waypoints with a fixed timestep dt
    - the agent frame puts the target agent at the origin at t=0 with its
      t=-1 -> t=0 displacement along the positive x-axis
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

OBJECT_TYPES = ("agent", "av", "other")


class TrajcastError(Exception):
    """Base class for all toolkit errors."""


class MissingTargetFrame(TrajcastError):
    """Target agent is absent at a frame required to build the agent frame."""


class Waypoint(NamedTuple):
    x: float
    y: float


def _frozen_array(values, shape_hint: str, allow_empty: bool = False) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if not allow_empty and arr.size == 0:
        raise ValueError(f"{shape_hint} must not be empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{shape_hint} contains non-finite values")
    arr.setflags(write=False)
    return arr


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotate_xy(xy: np.ndarray, theta: float) -> np.ndarray:
    # row-vector convention: each point p maps to R(theta) @ p
    return np.asarray(xy, dtype=np.float64) @ rotation_matrix(theta).T


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ordered 2-D waypoint sequence with a fixed timestep.

    points has shape (N, 2) with N >= 1; dt is seconds per step.
    """

    points: np.ndarray
    dt: float = 0.1

    def __post_init__(self):
        pts = _frozen_array(self.points, "trajectory points")
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"trajectory points must be (N, 2), got {pts.shape}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def waypoint(self, i: int) -> Waypoint:
        return Waypoint(float(self.points[i, 0]), float(self.points[i, 1]))

    @classmethod
    def from_waypoints(cls, waypoints: Sequence[tuple], dt: float = 0.1) -> "Trajectory":
        return cls(points=np.array(waypoints, dtype=np.float64), dt=dt)


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """One agent's observed positions over the scenario's frames.

    Frames where the agent was not observed are padded with the nearest
    observed waypoint and flagged False in `present`.
    """

    track_id: str
    object_type: str
    xy: np.ndarray        # (total_frames, 2)
    present: np.ndarray   # (total_frames,) bool

    def __post_init__(self):
        if self.object_type not in OBJECT_TYPES:
            raise ValueError(f"object_type must be one of {OBJECT_TYPES}, got {self.object_type!r}")
        xy = _frozen_array(self.xy, f"track {self.track_id} xy")
        if xy.ndim != 2 or xy.shape[1] != 2:
            raise ValueError(f"track xy must be (frames, 2), got {xy.shape}")
        present = np.array(self.present, dtype=bool)
        if present.shape != (xy.shape[0],):
            raise ValueError("presence mask length must match frame count")
        if not present.any():
            raise ValueError(f"track {self.track_id} is never present")
        present.setflags(write=False)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "present", present)


@dataclass(frozen=True, eq=False)
class Scenario:
    """One prediction problem: tracks, map polylines, and the target agent.

    Frames are indexed 0..total_frames-1; the last history frame
    (index history_len - 1) is t=0, so index history_len - 2 is t=-1 and the
    ground-truth future occupies indices history_len..total_frames-1.
    """

    scenario_id: str
    agents: tuple
    map_polylines: tuple
    target_track_id: str
    history_len: int = 20
    future_len: int = 30

    def __post_init__(self):
        agents = tuple(self.agents)
        polylines = tuple(self.map_polylines)
        if self.history_len < 2 or self.future_len < 1:
            raise ValueError("need history_len >= 2 and future_len >= 1")
        total = self.total_frames
        agent_tagged = [a for a in agents if a.object_type == "agent"]
        if len(agent_tagged) != 1:
            raise ValueError(f"scenario {self.scenario_id} must have exactly one 'agent' track, got {len(agent_tagged)}")
        ids = [a.track_id for a in agents]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate track ids")
        if self.target_track_id not in ids:
            raise ValueError(f"target track {self.target_track_id!r} not in scenario")
        for a in agents:
            if a.xy.shape[0] != total:
                raise ValueError(f"track {a.track_id} has {a.xy.shape[0]} frames, expected {total}")
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "map_polylines", polylines)

    @property
    def total_frames(self) -> int:
        return self.history_len + self.future_len

    @property
    def target(self) -> AgentTrack:
        for a in self.agents:
            if a.track_id == self.target_track_id:
                return a
        raise KeyError(self.target_track_id)

    def track(self, track_id: str) -> AgentTrack:
        for a in self.agents:
            if a.track_id == track_id:
                return a
        raise KeyError(track_id)

    def gt_future(self) -> Trajectory:
        """Target agent's ground-truth future as a Trajectory."""
        xy = self.target.xy[self.history_len:]
        return Trajectory(points=xy, dt=0.1)


@dataclass(frozen=True)
class Frame:
    """Rigid 2-D coordinate frame: to_frame rotates by `rotation` after
    translating the origin to zero."""

    origin: Waypoint
    rotation: float

    def __post_init__(self):
        if not (math.isfinite(self.origin.x) and math.isfinite(self.origin.y) and math.isfinite(self.rotation)):
            raise ValueError("frame origin and rotation must be finite")
        if not (-math.pi < self.rotation <= math.pi):
            raise ValueError(f"rotation must lie in (-pi, pi], got {self.rotation}")


IDENTITY_FRAME = Frame(origin=Waypoint(0.0, 0.0), rotation=0.0)

# displacements shorter than this give an undefined heading; rotation falls back to 0
STATIONARY_EPS = 1e-6


def track_frame(track: AgentTrack, end_index: int, heading_jitter: float = 0.0) -> Frame:
    """Agent-centric frame anchored at one frame of a track.

    Origin is the track position at end_index; rotation aligns the
    displacement from end_index-1 to end_index with the positive x-axis. A
    displacement shorter than STATIONARY_EPS leaves rotation at 0.
    `heading_jitter` (radians) is added to the derived rotation.

    Raises MissingTargetFrame if the track is absent at either frame.
    """
    if end_index < 1 or end_index >= track.xy.shape[0]:
        raise MissingTargetFrame(f"frame index {end_index} out of range for track {track.track_id}")
    for idx in (end_index - 1, end_index):
        if not track.present[idx]:
            raise MissingTargetFrame(f"track {track.track_id} absent at frame {idx}")
    p_prev = track.xy[end_index - 1]
    p_now = track.xy[end_index]
    d = p_now - p_prev
    if float(np.hypot(d[0], d[1])) < STATIONARY_EPS:
        rotation = 0.0
    else:
        rotation = -math.atan2(d[1], d[0])
    return Frame(origin=Waypoint(float(p_now[0]), float(p_now[1])),
                 rotation=normalize_angle(rotation + heading_jitter))


def agent_frame(scenario: Scenario, heading_jitter: float = 0.0) -> Frame:
    """Agent-centric frame for a scenario.

    Origin is the target position at t=0 (the last history frame); rotation
    aligns the t=-1 -> t=0 displacement with the positive x-axis.

    Raises MissingTargetFrame if the target is absent at t=-1 or t=0.
    """
    return track_frame(scenario.target, scenario.history_len - 1, heading_jitter)


def to_frame_xy(xy: np.ndarray, frame: Frame) -> np.ndarray:
    return rotate_xy(np.asarray(xy, dtype=np.float64) - np.array(frame.origin), frame.rotation)


def from_frame_xy(xy: np.ndarray, frame: Frame) -> np.ndarray:
    return rotate_xy(xy, -frame.rotation) + np.array(frame.origin)


def to_frame(traj: Trajectory, frame: Frame) -> Trajectory:
    """Re-express a world-frame trajectory in `frame` (rigid transform)."""
    return Trajectory(points=to_frame_xy(traj.points, frame), dt=traj.dt)


def from_frame(traj: Trajectory, frame: Frame) -> Trajectory:
    """Inverse of to_frame."""
    return Trajectory(points=from_frame_xy(traj.points, frame), dt=traj.dt)


@dataclass(frozen=True)
class FrameMap:
    """Affine map between two frames: p_dst = p_src @ matrix + offset."""

    matrix: np.ndarray  # (2, 2)
    offset: np.ndarray  # (2,)

    def apply(self, xy: np.ndarray) -> np.ndarray:
        return np.asarray(xy, dtype=np.float64) @ self.matrix + self.offset

    def backprop(self, d_dst: np.ndarray) -> np.ndarray:
        # gradient of apply w.r.t. its input
        return np.asarray(d_dst) @ self.matrix.T


def compose_frames(src: Frame, dst: Frame) -> FrameMap:
    """Map coordinates expressed in `src` directly into `dst`."""
    theta = dst.rotation - src.rotation
    matrix = rotation_matrix(theta).T
    offset = rotate_xy(np.array(src.origin) - np.array(dst.origin), dst.rotation)
    return FrameMap(matrix=matrix, offset=offset)


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """K predicted trajectories with K probabilities for one scenario."""

    trajectories: tuple
    scores: np.ndarray

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        if len(trajs) < 1:
            raise ValueError("need at least one trajectory")
        lengths = {len(t) for t in trajs}
        if len(lengths) != 1:
            raise ValueError(f"all trajectories must share a length, got {sorted(lengths)}")
        scores = _frozen_array(self.scores, "scores")
        if scores.shape != (len(trajs),):
            raise ValueError("need one score per trajectory")
        if np.any(scores < 0):
            raise ValueError("scores must be nonnegative")
        if abs(float(scores.sum()) - 1.0) > 1e-6:
            raise ValueError(f"scores must sum to 1, got {scores.sum()}")
        object.__setattr__(self, "trajectories", trajs)
        object.__setattr__(self, "scores", scores)

    @property
    def k(self) -> int:
        return len(self.trajectories)

    @property
    def horizon(self) -> int:
        return len(self.trajectories[0])

    def stacked(self) -> np.ndarray:
        """(K, T, 2) view of the trajectories."""
        return np.stack([t.points for t in self.trajectories])


@dataclass(frozen=True, eq=False)
class TargetSet:
    """J+1 supervision trajectories; index 0 is ground truth with confidence 1."""

    targets: tuple
    confidences: np.ndarray

    def __post_init__(self):
        targets = tuple(self.targets)
        if len(targets) < 1:
            raise ValueError("need at least the ground-truth target")
        lengths = {len(t) for t in targets}
        if len(lengths) != 1:
            raise ValueError(f"all targets must share a length, got {sorted(lengths)}")
        conf = _frozen_array(self.confidences, "confidences")
        if conf.shape != (len(targets),):
            raise ValueError("need one confidence per target")
        if conf[0] != 1.0:
            raise ValueError(f"ground-truth confidence must be exactly 1, got {conf[0]}")
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("confidences must lie in [0, 1]")
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "confidences", conf)

    @property
    def count(self) -> int:
        return len(self.targets)


@dataclass(frozen=True, eq=False)
class Window:
    """Model input cut from a scenario: target history, maps, and the frame.

    `shift` records how many frames past the scenario's nominal t=0 the
    window ends; gt_future is attached only where supervision is defined.
    All coordinates are world-frame; callers re-express via `frame`.
    """

    scenario_id: str
    history_xy: np.ndarray      # (M, 2) world frame
    history_mask: np.ndarray    # (M,) bool
    map_polylines: tuple
    frame: Frame
    gt_future: Trajectory | None = None
    shift: int = 0
    dt: float = 0.1

    def __post_init__(self):
        # empty history is representable here; the encoder is where it errors
        xy = _frozen_array(self.history_xy, "window history", allow_empty=True)
        mask = np.array(self.history_mask, dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "history_xy", xy)
        object.__setattr__(self, "history_mask", mask)
        object.__setattr__(self, "map_polylines", tuple(self.map_polylines))

    @property
    def history_len(self) -> int:
        return self.history_xy.shape[0]

    def history_in_frame(self) -> np.ndarray:
        return to_frame_xy(self.history_xy, self.frame)

    def maps_in_frame(self) -> list:
        return [to_frame_xy(p.points, self.frame) for p in self.map_polylines]


@dataclass(frozen=True)
class AugmentSpec:
    """Scene augmentation knobs.

    Flip reflects the world about the x-axis with probability p_flip; the
    global scale is drawn uniformly from scale_range. heading_jitter_deg
    perturbs the derived agent-frame orientation (a global scene rotation
    would cancel under agent-centric normalization, so the jitter is applied
    where the frame is built); consumed by the harness via sample_heading_jitter.
    """

    p_flip: float = 0.5
    scale_range: tuple = (0.8, 1.25)
    heading_jitter_deg: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.p_flip <= 1.0):
            raise ValueError("p_flip must lie in [0, 1]")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if self.heading_jitter_deg < 0.0:
            raise ValueError("heading_jitter_deg must be >= 0")


IDENTITY_AUGMENT = AugmentSpec(p_flip=0.0, scale_range=(1.0, 1.0), heading_jitter_deg=0.0)


@dataclass(frozen=True)
class SceneTransform:
    """A sampled flip/scale pair, applicable to any world-frame coordinates."""

    flip: bool = False
    scale: float = 1.0

    def apply_xy(self, xy: np.ndarray) -> np.ndarray:
        out = np.array(xy, dtype=np.float64)
        if self.flip:
            out[..., 1] = -out[..., 1]
        return out * self.scale

    def apply_trajectory(self, traj: Trajectory) -> Trajectory:
        return Trajectory(points=self.apply_xy(traj.points), dt=traj.dt)


def sample_transform(spec: AugmentSpec, rng: np.random.Generator) -> SceneTransform:
    flip = bool(rng.random() < spec.p_flip)
    scale = float(rng.uniform(spec.scale_range[0], spec.scale_range[1]))
    return SceneTransform(flip=flip, scale=scale)


def sample_heading_jitter(spec: AugmentSpec, rng: np.random.Generator) -> float:
    """Heading perturbation in radians, uniform in +-heading_jitter_deg."""
    if spec.heading_jitter_deg == 0.0:
        return 0.0
    bound = math.radians(spec.heading_jitter_deg)
    return float(rng.uniform(-bound, bound))


def apply_transform(scenario: Scenario, tf: SceneTransform) -> Scenario:
    """Apply a flip/scale transform to every coordinate in the scenario."""
    agents = tuple(
        AgentTrack(track_id=a.track_id, object_type=a.object_type,
                   xy=tf.apply_xy(a.xy), present=a.present)
        for a in scenario.agents
    )
    polylines = tuple(tf.apply_trajectory(p) for p in scenario.map_polylines)
    return Scenario(scenario_id=scenario.scenario_id, agents=agents,
                    map_polylines=polylines, target_track_id=scenario.target_track_id,
                    history_len=scenario.history_len, future_len=scenario.future_len)


def augment(scenario: Scenario, spec: AugmentSpec, rng_seed: int) -> Scenario:
    """Randomly flip and rescale a scenario, deterministically for a seed."""
    tf = sample_transform(spec, np.random.default_rng(rng_seed))
    return apply_transform(scenario, tf)
