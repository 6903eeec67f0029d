"""22-joint kinematic tree: forward kinematics, sagittal mirroring, resampling and BVH export."""

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from textmotion.errors import DataError, TooShort
from textmotion.motion import MotionSequence
from textmotion.rotations import (
    NUM_JOINTS,
    TRANSLATION_SLICE,
    euler_zyx_to_matrix,
    matrix_to_euler_zyx,
    pose_rotations,
    slerp_pose,
)

SKELETON_TABLE = "skeleton_v1.json"


@dataclass(frozen=True, eq=False)
class Skeleton:
    joint_names: tuple
    parent: tuple
    offsets: np.ndarray
    left_right_pairs: tuple
    version: int = 1

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.float64)
        offsets.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)
        if len(self.joint_names) != len(self.parent) or offsets.shape != (len(self.parent), 3):
            raise DataError("joint table sizes disagree")
        if self.parent[0] != -1 or np.any(offsets[0] != 0):
            raise DataError("joint 0 must be the root with a zero offset")
        for j, p in enumerate(self.parent[1:], start=1):
            if not 0 <= p < j:
                raise DataError(f"joint {j} has parent {p}; the table must be topologically ordered")
        if not np.all(np.isfinite(offsets)):
            raise DataError("non-finite offsets")

    @property
    def num_joints(self):
        return len(self.joint_names)

    def index(self, name):
        return self.joint_names.index(name)

    def children(self, j):
        return [c for c, p in enumerate(self.parent) if p == j]

    def rest_positions(self):
        pos = np.zeros((self.num_joints, 3))
        for j in range(1, self.num_joints):
            pos[j] = pos[self.parent[j]] + self.offsets[j]
        return pos

    def height(self):
        rest = self.rest_positions()
        return float(rest[:, 1].max() - rest[:, 1].min())

    def bone_lengths(self):
        return np.linalg.norm(self.offsets[1:], axis=-1)


def _pairs_from_names(names):
    pairs = []
    for i, name in enumerate(names):
        if name.startswith("left_"):
            partner = "right_" + name[len("left_"):]
            if partner not in names:
                raise DataError(f"{name} has no right partner")
            pairs.append((i, names.index(partner)))
    n_right = sum(1 for n in names if n.startswith("right_"))
    if n_right != len(pairs):
        raise DataError("unpaired right-side joints in table")
    return tuple(pairs)


def load_skeleton(path=None):
    if path is None:
        text = resources.files("textmotion.data").joinpath(SKELETON_TABLE).read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    table = json.loads(text)
    joints = table["joints"]
    names = tuple(j["name"] for j in joints)
    return Skeleton(
        joint_names=names,
        parent=tuple(int(j["parent"]) for j in joints),
        offsets=np.array([j["offset"] for j in joints], dtype=np.float64),
        left_right_pairs=_pairs_from_names(names),
        version=int(table.get("version", 1)),
    )


_DEFAULT = None


def default_skeleton():
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_skeleton()
        if _DEFAULT.num_joints != NUM_JOINTS:
            raise DataError(f"default skeleton must have {NUM_JOINTS} joints")
    return _DEFAULT


def forward_kinematics(skeleton, pose, return_rotations=False):
    """World joint positions for a pose or any batch of poses ``(..., 135)``.

    Returns ``(..., 22, 3)``; with ``return_rotations`` also the world
    rotation matrices ``(..., 22, 3, 3)``.
    """
    pose = np.asarray(pose, dtype=np.float64)
    local = pose_rotations(pose)
    world_r = np.empty_like(local)
    pos = np.empty(pose.shape[:-1] + (skeleton.num_joints, 3))
    world_r[..., 0, :, :] = local[..., 0, :, :]
    pos[..., 0, :] = pose[..., TRANSLATION_SLICE]
    for j in range(1, skeleton.num_joints):
        p = skeleton.parent[j]
        world_r[..., j, :, :] = world_r[..., p, :, :] @ local[..., j, :, :]
        pos[..., j, :] = pos[..., p, :] + world_r[..., p, :, :] @ skeleton.offsets[j]
    if return_rotations:
        return pos, world_r
    return pos


# S = diag(-1, 1, 1); for R = [a b c], S R S has columns (-S a, S b, ...)
_MIRROR_A = np.array([1.0, -1.0, -1.0])
_MIRROR_B = np.array([-1.0, 1.0, 1.0])


def mirror_pose(skeleton, pose):
    """Reflect a pose (or batch) through the sagittal plane x = 0."""
    pose = np.asarray(pose, dtype=np.float64)
    rots = pose[..., : NUM_JOINTS * 6].reshape(pose.shape[:-1] + (NUM_JOINTS, 6))
    mirrored = np.concatenate([rots[..., :3] * _MIRROR_A, rots[..., 3:] * _MIRROR_B], axis=-1)
    swapped = mirrored.copy()
    for left, right in skeleton.left_right_pairs:
        swapped[..., left, :] = mirrored[..., right, :]
        swapped[..., right, :] = mirrored[..., left, :]
    trans = pose[..., TRANSLATION_SLICE] * np.array([-1.0, 1.0, 1.0])
    return np.concatenate([swapped.reshape(pose.shape[:-1] + (NUM_JOINTS * 6,)), trans], axis=-1)


_SIDE_WORD = re.compile(r"\b(left|right)\b", re.IGNORECASE)


def _match_case(template, word):
    if template.isupper():
        return word.upper()
    if template[0].isupper():
        return word.capitalize()
    return word


def mirror_caption(caption):
    """Swap standalone "left"/"right" words, preserving their case."""
    if caption is None:
        return None

    def swap(m):
        word = m.group(0)
        return _match_case(word, "right" if word.lower() == "left" else "left")

    return _SIDE_WORD.sub(swap, caption)


_SIDE_SWAP = {"left": "right", "right": "left"}


def mirror_motion(skeleton, motion, caption=None):
    """Mirror a motion and its caption; returns ``(motion, caption)``.

    ``caption`` defaults to the motion's own caption. Side labels in
    ``meta`` are swapped too.
    """
    if caption is None:
        caption = motion.caption
    new_caption = mirror_caption(caption)
    meta = dict(motion.meta)
    if meta.get("side") in _SIDE_SWAP:
        meta["side"] = _SIDE_SWAP[meta["side"]]
    mirrored = MotionSequence(mirror_pose(skeleton, motion.frames), motion.fps, new_caption, meta)
    return mirrored, new_caption


def resample_motion(motion, target_frames):
    """Resample to ``target_frames`` spread uniformly over the same duration.

    Endpoints (and any output frame landing exactly on an input frame) are
    copied unchanged. The fps is scaled so the clip duration is preserved.
    """
    n = motion.num_frames
    if n < 2 or target_frames < 2:
        raise TooShort(f"resampling needs at least 2 source and target frames (got {n} -> {target_frames})")
    if target_frames == n:
        return motion.with_(frames=motion.frames.copy())
    src = np.arange(target_frames) * (n - 1) / (target_frames - 1)
    lo = np.minimum(np.floor(src).astype(int), n - 2)
    u = src - lo
    frames = slerp_pose(motion.frames[lo], motion.frames[lo + 1], u)
    fps = motion.fps * (target_frames - 1) / (n - 1)
    return motion.with_(frames=frames, fps=fps)


def _bvh_order(skeleton):
    order = []

    def visit(j):
        order.append(j)
        for c in skeleton.children(j):
            visit(c)

    visit(0)
    return order


def export_bvh(skeleton, motion, path):
    """Write a BVH file: offsets and root positions in centimeters, ZYX Euler degrees."""
    lines = ["HIERARCHY"]

    def fmt(v):
        return " ".join(f"{x:.6f}" for x in v)

    def emit(j, depth):
        pad = "\t" * depth
        kind = "ROOT" if j == 0 else "JOINT"
        lines.append(f"{pad}{kind} {skeleton.joint_names[j]}")
        lines.append(f"{pad}{{")
        lines.append(f"{pad}\tOFFSET {fmt(skeleton.offsets[j] * 100.0)}")
        if j == 0:
            lines.append(f"{pad}\tCHANNELS 6 Xposition Yposition Zposition Zrotation Yrotation Xrotation")
        else:
            lines.append(f"{pad}\tCHANNELS 3 Zrotation Yrotation Xrotation")
        kids = skeleton.children(j)
        for c in kids:
            emit(c, depth + 1)
        if not kids:
            lines.append(f"{pad}\tEnd Site")
            lines.append(f"{pad}\t{{")
            lines.append(f"{pad}\t\tOFFSET {fmt((0.0, 0.0, 0.0))}")
            lines.append(f"{pad}\t}}")
        lines.append(f"{pad}}}")

    emit(0, 0)
    order = _bvh_order(skeleton)
    local = pose_rotations(motion.frames)
    euler = np.degrees(matrix_to_euler_zyx(local))  # (N, 22, 3)
    euler = np.where(np.abs(euler) < 5e-7, 0.0, euler)  # avoid "-0.000000"
    lines.append("MOTION")
    lines.append(f"Frames: {motion.num_frames}")
    lines.append(f"Frame Time: {1.0 / motion.fps:.6f}")
    for i in range(motion.num_frames):
        root = motion.frames[i, TRANSLATION_SLICE] * 100.0
        vals = list(root)
        for j in order:
            vals.extend(euler[i, j])
        lines.append(" ".join(f"{v:.6f}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def parse_bvh(path):
    """Minimal reader for files produced by :func:`export_bvh`.

    Returns a dict with ``names`` (hierarchy order), ``parents``,
    ``offsets`` (cm), ``frame_time`` and ``motion`` (frames x channels).
    """
    text = Path(path).read_text(encoding="utf-8")
    head, _, body = text.partition("MOTION")
    names, parents, offsets, stack = [], [], [], []
    in_end_site = False
    for raw in head.splitlines():
        tok = raw.split()
        if not tok:
            continue
        if tok[0] in ("ROOT", "JOINT"):
            names.append(tok[1])
            parents.append(stack[-1] if stack else -1)
        elif tok[0] == "End":
            in_end_site = True
        elif tok[0] == "{":
            if not in_end_site:
                stack.append(len(names) - 1)
        elif tok[0] == "}":
            if in_end_site:
                in_end_site = False
            else:
                stack.pop()
        elif tok[0] == "OFFSET" and not in_end_site:
            offsets.append([float(x) for x in tok[1:4]])
    body_lines = [ln for ln in body.splitlines() if ln.strip()]
    n_frames = int(body_lines[0].split(":")[1])
    frame_time = float(body_lines[1].split(":")[1])
    motion = np.array([[float(x) for x in ln.split()] for ln in body_lines[2 : 2 + n_frames]])
    return {
        "names": names,
        "parents": parents,
        "offsets": np.array(offsets),
        "frame_time": frame_time,
        "motion": motion,
    }


def bvh_local_rotations(parsed, skeleton):
    """Recover per-frame local rotation matrices in skeleton index order from parsed BVH data."""
    motion = parsed["motion"]
    n = motion.shape[0]
    out = np.empty((n, skeleton.num_joints, 3, 3))
    for k, name in enumerate(parsed["names"]):
        cols = motion[:, 3 + 3 * k : 6 + 3 * k]
        out[:, skeleton.index(name)] = euler_zyx_to_matrix(np.radians(cols))
    return out
