"""Skeleton data model, dataset files, preprocessing and synthetic gaits.

Coordinates are metres in a y-up world frame; walkers travel along +x and a
walker's left side points to +z.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

NUM_JOINTS = 16
EMOTIONS = ("happy", "sad", "angry", "neutral")
NUM_CLASSES = len(EMOTIONS)

JOINT_NAMES = (
    "root", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_hand",
    "r_shoulder", "r_elbow", "r_hand",
    "l_hip", "l_knee", "l_foot",
    "r_hip", "r_knee", "r_foot",
)
J = {name: i for i, name in enumerate(JOINT_NAMES)}

EDGES = (
    (0, 1), (1, 2), (2, 3),
    (2, 4), (4, 5), (5, 6),
    (2, 7), (7, 8), (8, 9),
    (0, 10), (10, 11), (11, 12),
    (0, 13), (13, 14), (14, 15),
)


class DatasetError(ValueError):
    pass


class DegenerateSkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonTopology:
    num_joints: int = NUM_JOINTS
    edges: tuple = EDGES
    root: int = 0
    names: tuple = JOINT_NAMES

    def hop_distance(self) -> np.ndarray:
        """Hop count of every joint from the root; raises if the graph is disconnected."""
        adj = [[] for _ in range(self.num_joints)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        depth = np.full(self.num_joints, -1)
        depth[self.root] = 0
        queue = [self.root]
        while queue:
            node = queue.pop(0)
            for nb in adj[node]:
                if depth[nb] < 0:
                    depth[nb] = depth[node] + 1
                    queue.append(nb)
        if (depth < 0).any():
            raise ValueError(f"topology is disconnected: joints {np.flatnonzero(depth < 0).tolist()} unreachable")
        return depth

    def is_tree(self) -> bool:
        try:
            self.hop_distance()
        except ValueError:
            return False
        return len(self.edges) == self.num_joints - 1


DEFAULT_TOPOLOGY = SkeletonTopology()


def label_index(label: Union[str, int]) -> int:
    if isinstance(label, (int, np.integer)):
        if not 0 <= int(label) < NUM_CLASSES:
            raise DatasetError(f"label {label} out of range")
        return int(label)
    try:
        return EMOTIONS.index(label)
    except ValueError:
        raise DatasetError(f"unknown emotion label {label!r}") from None


@dataclass
class SkeletonSequence:
    frames: np.ndarray  # [T, 16, 3]
    label: int
    id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.label = label_index(self.label)
        f = self.frames
        if f.ndim != 3 or f.shape[1] != NUM_JOINTS or f.shape[2] != 3:
            raise DatasetError(f"sequence {self.id!r}: expected frames shaped [T, 16, 3], got {f.shape}")
        if f.shape[0] < 2:
            raise DatasetError(f"sequence {self.id!r}: needs at least 2 frames")
        if not np.isfinite(f).all():
            raise DatasetError(f"sequence {self.id!r}: non-finite coordinate")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def emotion(self) -> str:
        return EMOTIONS[self.label]

    def to_record(self) -> dict:
        return {"id": self.id, "label": self.emotion, "frames": self.frames.tolist()}


# ---------------------------------------------------------------- file format

def _parse_record(obj, lineno: int) -> SkeletonSequence:
    if not isinstance(obj, dict):
        raise DatasetError(f"line {lineno}: record must be a JSON object")
    rid = str(obj.get("id", f"line{lineno}"))
    for key in ("label", "frames"):
        if key not in obj:
            raise DatasetError(f"line {lineno} (id {rid!r}): missing field {key!r}")
    frames = obj["frames"]
    if not isinstance(frames, list) or not frames:
        raise DatasetError(f"line {lineno} (id {rid!r}): frames must be a non-empty list")
    for t, frame in enumerate(frames):
        if not isinstance(frame, list) or len(frame) != NUM_JOINTS:
            n = len(frame) if isinstance(frame, list) else "?"
            raise DatasetError(f"line {lineno} (id {rid!r}): frame {t} has {n} joints, expected {NUM_JOINTS}")
        for j, xyz in enumerate(frame):
            if not isinstance(xyz, list) or len(xyz) != 3 or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in xyz):
                raise DatasetError(f"line {lineno} (id {rid!r}): frame {t} joint {j} is not 3 numbers")
    try:
        return SkeletonSequence(np.array(frames, dtype=np.float64), obj["label"], rid)
    except DatasetError as exc:
        raise DatasetError(f"line {lineno} (id {rid!r}): {exc}") from None


def load_dataset(path: Union[str, Path]) -> List[SkeletonSequence]:
    """Read a JSON-Lines dataset; blank lines are skipped."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            out.append(_parse_record(obj, lineno))
    return out


def save_dataset(seqs: Iterable[SkeletonSequence], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in seqs:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")))
            fh.write("\n")


# -------------------------------------------------------------- preprocessing

def resample(seq: SkeletonSequence, target_T: int = 48) -> SkeletonSequence:
    """Pick ``target_T`` frames at floor(i*T/target_T); short clips are extended cyclically first."""
    frames = seq.frames
    T = frames.shape[0]
    if T < target_T:
        frames = frames[np.arange(target_T) % T]
        T = target_T
    idx = (np.arange(target_T) * T) // target_T
    return replace(seq, frames=frames[idx].copy())


def center(seq: SkeletonSequence) -> SkeletonSequence:
    """Translate so the clip-mean root position sits at the origin."""
    offset = seq.frames[:, 0].mean(axis=0)
    return replace(seq, frames=seq.frames - offset)


def rotation_matrix(angles: Sequence[float]) -> np.ndarray:
    """Rotation Rz @ Ry @ Rx for angles (rx, ry, rz) in radians."""
    rx, ry, rz = angles
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


MAX_ROTATION = math.radians(17.0)   # about the vertical (y) axis
MAX_TILT = 0.0                      # about x and z; tilting changes gravity-relative posture
MAX_TRANSLATION = 0.1


def draw_rotation(rng, max_angle, max_tilt):
    return rng.uniform(-1.0, 1.0, size=3) * np.array([max_tilt, max_angle, max_tilt])


def rigid_transform(seq: SkeletonSequence, angles, translation) -> SkeletonSequence:
    R = rotation_matrix(angles)
    frames = seq.frames @ R.T + np.asarray(translation, dtype=np.float64)
    return replace(seq, frames=frames)


def augment(seq: SkeletonSequence, rng: np.random.Generator,
            max_angle: float = MAX_ROTATION, max_shift: float = MAX_TRANSLATION,
            max_tilt: float = MAX_TILT) -> SkeletonSequence:
    """One random rotation plus one random translation.

    Yaw is drawn within +-max_angle, pitch and roll within +-max_tilt.
    """
    angles = draw_rotation(rng, max_angle, max_tilt)
    shift = rng.uniform(-max_shift, max_shift, size=3)
    return rigid_transform(seq, angles, shift)


def extract_motion(frames: np.ndarray) -> np.ndarray:
    """Velocity/acceleration channels from positions.

    ``frames`` is [..., T, N, 3]; the result is [..., T, N, 8] holding
    (vx, vy, vz, |v|, ax, ay, az, |a|). Backward differences, with the
    first velocity and acceleration frames set to zero.
    """
    x = np.asarray(frames)
    if isinstance(frames, SkeletonSequence):  # pragma: no cover - convenience
        x = frames.frames
    v = np.zeros_like(x)
    v[..., 1:, :, :] = x[..., 1:, :, :] - x[..., :-1, :, :]
    a = np.zeros_like(x)
    a[..., 1:, :, :] = v[..., 1:, :, :] - v[..., :-1, :, :]
    vn = np.linalg.norm(v, axis=-1, keepdims=True)
    an = np.linalg.norm(a, axis=-1, keepdims=True)
    return np.concatenate([v, vn, a, an], axis=-1)


def to_model_input(frames: np.ndarray) -> np.ndarray:
    """[..., T, N, C] -> [..., C, T, N]."""
    return np.moveaxis(frames, -1, -3)


# ------------------------------------------------------------ affective cues

ANGLE_NAMES = (
    "head_tilt", "spine_lean",
    "l_shoulder_abduction", "r_shoulder_abduction",
    "l_elbow_flexion", "r_elbow_flexion",
    "l_hip_flexion", "r_hip_flexion",
    "l_knee_flexion", "r_knee_flexion",
    "l_arm_swing", "r_arm_swing",
    "inter_thigh", "head_spine",
)
DISTANCE_PAIRS = (
    ("l_hand", "r_hand"), ("l_foot", "r_foot"),
    ("l_hand", "root"), ("r_hand", "root"),
    ("l_foot", "root"), ("r_foot", "root"),
    ("head", "root"),
    ("l_hand", "head"), ("r_hand", "head"),
)
AREA_TRIANGLES = (
    ("neck", "l_hand", "r_hand"), ("root", "l_foot", "r_foot"),
    ("head", "l_hand", "r_hand"), ("root", "l_hand", "r_hand"),
    ("neck", "l_foot", "r_foot"), ("head", "l_foot", "r_foot"),
    ("root", "l_knee", "r_knee"), ("neck", "l_elbow", "r_elbow"),
)
AFFECTIVE_NAMES = (ANGLE_NAMES
                   + tuple(f"dist_{a}_{b}" for a, b in DISTANCE_PAIRS)
                   + tuple("area_" + "_".join(t) for t in AREA_TRIANGLES))
NUM_AFFECTIVE = len(AFFECTIVE_NAMES)  # 14 + 9 + 8


def _angle(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    dot = (u * v).sum(-1)
    # zero-length limbs give cos = 0, i.e. a right angle, which keeps the value finite
    cos = np.where((nu > 1e-12) & (nv > 1e-12), dot / np.maximum(nu * nv, 1e-300), 0.0)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def compute_affective(seq: Union[SkeletonSequence, np.ndarray]) -> np.ndarray:
    """The 31 geometric gait descriptors, each averaged over frames.

    Angles are in radians. Distances are divided by the clip-mean
    root-to-neck length and areas by its square. The two posture angles use
    a body-fixed vertical (clip-mean direction from the feet midpoint to the
    root) so every feature is invariant to rigid motion and uniform scaling.
    """
    x = seq.frames if isinstance(seq, SkeletonSequence) else np.asarray(seq, dtype=np.float64)
    P = {name: x[:, i] for name, i in J.items()}
    unit = np.linalg.norm(P["neck"] - P["root"], axis=-1).mean()
    if not unit > 1e-6:
        raise DegenerateSkeletonError("root-to-neck length is (near) zero")

    up = (P["root"] - 0.5 * (P["l_foot"] + P["r_foot"])).mean(axis=0)
    up_norm = np.linalg.norm(up)
    if up_norm < 1e-12:
        up = (P["neck"] - P["root"]).mean(axis=0)
        up_norm = max(np.linalg.norm(up), 1e-300)
    up = np.broadcast_to(up / up_norm, P["root"].shape)

    spine_down = P["root"] - P["neck"]
    angles = [
        _angle(P["head"] - P["neck"], up),
        _angle(P["neck"] - P["root"], up),
        _angle(P["l_elbow"] - P["l_shoulder"], P["r_shoulder"] - P["l_shoulder"]),
        _angle(P["r_elbow"] - P["r_shoulder"], P["l_shoulder"] - P["r_shoulder"]),
        _angle(P["l_shoulder"] - P["l_elbow"], P["l_hand"] - P["l_elbow"]),
        _angle(P["r_shoulder"] - P["r_elbow"], P["r_hand"] - P["r_elbow"]),
        _angle(P["l_knee"] - P["l_hip"], -spine_down),
        _angle(P["r_knee"] - P["r_hip"], -spine_down),
        _angle(P["l_hip"] - P["l_knee"], P["l_foot"] - P["l_knee"]),
        _angle(P["r_hip"] - P["r_knee"], P["r_foot"] - P["r_knee"]),
        _angle(P["l_elbow"] - P["l_shoulder"], spine_down),
        _angle(P["r_elbow"] - P["r_shoulder"], spine_down),
        _angle(P["l_knee"] - P["l_hip"], P["r_knee"] - P["r_hip"]),
        _angle(P["head"] - P["neck"], P["root"] - P["neck"]),
    ]
    dists = [np.linalg.norm(P[a] - P[b], axis=-1) / unit for a, b in DISTANCE_PAIRS]
    areas = [0.5 * np.linalg.norm(np.cross(P[b] - P[a], P[c] - P[a]), axis=-1) / unit ** 2
             for a, b, c in AREA_TRIANGLES]
    return np.array([q.mean() for q in angles + dists + areas])


# -------------------------------------------------------- synthetic generator

@dataclass
class ClassPreset:
    frequency_hz: float   # gait cycles per second
    stride_amp: float     # peak hip flexion (rad)
    arm_amp: float        # peak shoulder swing (rad)
    slump_rad: float      # forward torso lean (rad)
    speed: float          # forward speed (m/s)
    noise_std: float = 0.01


DEFAULT_PRESETS: Dict[str, ClassPreset] = {
    "happy": ClassPreset(frequency_hz=1.00, stride_amp=0.42, arm_amp=0.50, slump_rad=-0.06, speed=1.35),
    "sad": ClassPreset(frequency_hz=0.78, stride_amp=0.28, arm_amp=0.20, slump_rad=0.28, speed=0.85),
    "angry": ClassPreset(frequency_hz=1.05, stride_amp=0.46, arm_amp=0.60, slump_rad=0.12, speed=1.45),
    "neutral": ClassPreset(frequency_hz=0.90, stride_amp=0.36, arm_amp=0.36, slump_rad=0.03, speed=1.15),
}

# per-sample jitter (std) of each preset field, scaled by GeneratorConfig.variability
_JITTER = {"frequency_hz": 0.06, "stride_amp": 0.05, "arm_amp": 0.08, "slump_rad": 0.06, "speed": 0.12}


@dataclass
class GeneratorConfig:
    presets: Dict[str, ClassPreset] = field(default_factory=lambda: {k: replace(v) for k, v in DEFAULT_PRESETS.items()})
    frames: int = 240
    fps: float = 60.0
    variability: float = 0.5
    body_scale_std: float = 0.06
    max_heading_deg: float = 15.0

    @classmethod
    def from_dict(cls, obj: Mapping) -> "GeneratorConfig":
        cfg = cls()
        for key, value in obj.items():
            if key == "presets":
                for name, over in value.items():
                    label_index(name)
                    cfg.presets[name] = replace(cfg.presets[name], **over)
            elif hasattr(cfg, key):
                setattr(cfg, key, value)
            else:
                raise KeyError(f"unknown generator config field {key!r}")
        return cfg

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def generate_synthetic(label: Union[str, int], rng: np.random.Generator,
                       params: Optional[GeneratorConfig] = None, seq_id: str = "") -> SkeletonSequence:
    """Procedural walk cycle on the 16-joint skeleton for one emotion class."""
    cfg = params or GeneratorConfig()
    label = label_index(label)
    preset = cfg.presets[EMOTIONS[label]]
    jit = {k: getattr(preset, k) + cfg.variability * s * rng.standard_normal() for k, s in _JITTER.items()}
    freq = max(jit["frequency_hz"], 0.3)
    stride = max(jit["stride_amp"], 0.05)
    arm = max(jit["arm_amp"], 0.02)
    slump = jit["slump_rad"]
    speed = max(jit["speed"], 0.2)
    scale = 1.0 + cfg.body_scale_std * rng.standard_normal()
    phase0 = rng.uniform(0, 2 * math.pi)
    heading = math.radians(rng.uniform(-cfg.max_heading_deg, cfg.max_heading_deg))

    T = cfg.frames
    t = np.arange(T) / cfg.fps
    phi = 2 * math.pi * freq * t + phase0
    X = np.zeros((T, NUM_JOINTS, 3))

    def sag(angle, length, side=0.0):
        # limb pointing down, swung forward by `angle`, tilted sideways by `side`
        return length * np.stack([np.sin(angle) * math.cos(side), -np.cos(angle) * math.cos(side),
                                  np.full_like(angle, math.sin(side))], axis=-1)

    bob = 0.015 * (1 + 2 * stride) * np.cos(2 * phi)
    root = np.stack([speed * t, 0.95 * scale + bob, 0.02 * np.sin(phi)], axis=-1)
    up = np.array([math.sin(slump), math.cos(slump), 0.0])
    X[:, J["root"]] = root
    X[:, J["spine"]] = root + 0.25 * scale * up
    X[:, J["neck"]] = root + 0.50 * scale * up
    head_angle = slump * 1.5
    X[:, J["head"]] = X[:, J["neck"]] + 0.15 * scale * np.array([math.sin(head_angle), math.cos(head_angle), 0.0])

    elbow_base = 0.25 + 0.4 * arm
    for side, sign, arm_phase, leg_phase in (("l", 1.0, phi + math.pi, phi), ("r", -1.0, phi, phi + math.pi)):
        shoulder = X[:, J["neck"]] + scale * np.array([0.0, -0.03, sign * 0.18])
        swing = arm * np.sin(arm_phase) + 0.5 * slump
        elbow_flex = elbow_base + 0.3 * arm * (1 + np.sin(arm_phase))
        elbow = shoulder + sag(swing, 0.28 * scale, sign * 0.08)
        hand = elbow + sag(swing + elbow_flex, 0.26 * scale, sign * 0.05)
        X[:, J[f"{side}_shoulder"]] = shoulder
        X[:, J[f"{side}_elbow"]] = elbow
        X[:, J[f"{side}_hand"]] = hand

        hip = root + scale * np.array([0.0, -0.05, sign * 0.10])
        hip_flex = stride * np.sin(leg_phase)
        knee_flex = 1.2 * stride * np.maximum(0.0, np.sin(leg_phase + math.pi / 2)) + 0.05
        knee = hip + sag(hip_flex, 0.45 * scale)
        foot = knee + sag(hip_flex - knee_flex, 0.45 * scale)
        X[:, J[f"{side}_hip"]] = hip
        X[:, J[f"{side}_knee"]] = knee
        X[:, J[f"{side}_foot"]] = foot

    c, s = math.cos(heading), math.sin(heading)
    yaw = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    X = X @ yaw.T
    X += preset.noise_std * rng.standard_normal(X.shape)
    return SkeletonSequence(X, label, seq_id)


def generate_dataset(class_counts: Union[int, Sequence[int], Mapping[str, int]], seed: int = 0,
                     config: Optional[GeneratorConfig] = None) -> List[SkeletonSequence]:
    """Synthetic dataset; each sample draws from its own child seed, so output is order-stable."""
    if isinstance(class_counts, int):
        counts = [class_counts] * NUM_CLASSES
    elif isinstance(class_counts, Mapping):
        counts = [int(class_counts.get(name, 0)) for name in EMOTIONS]
    else:
        counts = [int(c) for c in class_counts]
    children = np.random.SeedSequence(seed).spawn(sum(counts))
    out = []
    k = 0
    for label, n in enumerate(counts):
        for i in range(n):
            rng = np.random.default_rng(children[k])
            out.append(generate_synthetic(label, rng, config, seq_id=f"syn-{EMOTIONS[label]}-{i:04d}"))
            k += 1
    return out
