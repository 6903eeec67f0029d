"""Procedural text-motion corpus, static-pose extraction, standardization and motion file I/O.

Five parametric motion families (``raise_arm``, ``wave``, ``squat``, ``turn``,
``walk_forward``), three of them with a left/right side, give eight caption
classes. Every clip also draws a tempo (``slow``/``fast``) that changes both
the motion and the adverb in its caption.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from textmotion.errors import BadSpec, EmptyCorpus, ParseError
from textmotion.motion import MotionSequence
from textmotion.rotations import NUM_JOINTS, POSE_DIM, TRANSLATION_SLICE, axis_angle_to_matrix, pose_from_matrices
from textmotion.skeleton import default_skeleton, mirror_motion

FAMILIES = ("raise_arm", "wave", "squat", "turn", "walk_forward")
SIDED = {"raise_arm", "wave", "turn"}
TEMPOS = ("slow", "fast")

CAPTION_TEMPLATES = {
    "raise_arm": (
        "a person {adv} raises their {side} arm",
        "someone lifts the {side} arm up {adv}",
        "a man {adv} raises his {side} hand",
        "the person {adv} puts the {side} arm up",
    ),
    "wave": (
        "a person waves {adv} with the {side} hand",
        "someone {adv} waves their {side} arm",
        "the man waves hello {adv} using his {side} hand",
        "a person lifts the {side} hand and waves {adv}",
    ),
    "squat": (
        "a person squats down {adv}",
        "someone {adv} does a squat",
        "the person bends the knees and squats {adv}",
        "a man {adv} crouches down and stands back up",
    ),
    "turn": (
        "a person turns {adv} to the {side}",
        "someone {adv} turns {side}",
        "the person rotates {adv} toward the {side}",
        "a man turns around to his {side} {adv}",
    ),
    "walk_forward": (
        "a person walks forward {adv}",
        "someone {adv} walks straight ahead",
        "the person takes a few steps forward {adv}",
        "a man {adv} walks ahead",
    ),
}

ADVERBS = {"slow": ("slowly", "gradually"), "fast": ("quickly", "briskly")}

STATIC_TEMPLATES = {
    "raise_arm": "a person standing with the {side} arm raised",
    "wave": "a person waving with the {side} hand",
    "squat": "a person in a squat",
    "turn": "a person turning to the {side}",
    "walk_forward": "a person walking forward",
}

DEFAULT_COUNTS = {"raise_arm": 50, "wave": 50, "squat": 25, "turn": 50, "walk_forward": 25}


@dataclass
class DatasetSpec:
    seed: int = 0
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    frames: int = 24
    fps: float = 20.0
    heading_range: float = math.pi / 4

    def validate(self):
        unknown = set(self.counts) - set(FAMILIES)
        if unknown:
            raise BadSpec(f"unknown motion families: {sorted(unknown)}")
        if any(int(c) < 0 for c in self.counts.values()):
            raise BadSpec("family counts must be >= 0")
        if self.frames < 2:
            raise BadSpec("clips need at least 2 frames")
        if not self.fps > 0:
            raise BadSpec("fps must be positive")


def caption_class(meta):
    """``family`` or ``family:side`` label used to group captions."""
    fam = meta.get("family")
    side = meta.get("side")
    return f"{fam}:{side}" if side else fam


def _rot(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    return axis_angle_to_matrix(angle[..., None] * axis)


_X, _Y, _Z = np.eye(3)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


class _ClipBuilder:
    def __init__(self, skeleton, n):
        self.sk = skeleton
        self.local = np.tile(np.eye(3), (n, NUM_JOINTS, 1, 1))
        self.trans = np.zeros((n, 3))
        hang = math.radians(75.0)
        self.set("left_shoulder", _rot(_Z, np.full(n, -hang)))
        self.set("right_shoulder", _rot(_Z, np.full(n, hang)))

    def set(self, name, mats):
        self.local[:, self.sk.index(name)] = mats

    def pre(self, name, mats):
        """Apply ``mats`` in the parent frame after the current local rotation."""
        j = self.sk.index(name)
        self.local[:, j] = mats @ self.local[:, j]

    def post(self, name, mats):
        j = self.sk.index(name)
        self.local[:, j] = self.local[:, j] @ mats

    def frames(self):
        return pose_from_matrices(self.local, self.trans)


def _side_sign(side):
    return 1.0 if side == "left" else -1.0


def _raise_arm(b, u, tempo, side, amp, rng):
    dur = 1.0 if tempo == "slow" else 0.5
    angle = math.radians(90.0) * amp * _smoothstep(u / dur)
    b.pre(f"{side}_shoulder", _rot(_Z, _side_sign(side) * angle))
    b.post(f"{side}_elbow", _rot(_Y, -_side_sign(side) * math.radians(10.0) * _smoothstep(u / dur)))


def _wave(b, u, tempo, side, amp, rng, t):
    s = _side_sign(side)
    lift = math.radians(150.0) * _smoothstep(u / 0.3)
    b.pre(f"{side}_shoulder", _rot(_Z, s * lift))
    freq = 1.2 if tempo == "slow" else 2.5
    phase = rng.uniform(0, 2 * math.pi)
    swing = math.radians(35.0) * amp * np.sin(2 * math.pi * freq * t + phase) * _smoothstep(u / 0.3)
    b.post(f"{side}_elbow", _rot(_Z, s * (math.radians(40.0) + swing)))


def _squat(b, u, tempo, amp):
    cycles = 1 if tempo == "slow" else 2
    depth = np.sin(math.pi * cycles * u) ** 2
    a = math.radians(70.0) * amp * depth
    for side in ("left", "right"):
        b.set(f"{side}_hip", _rot(_X, -a))
        b.set(f"{side}_knee", _rot(_X, 2 * a))
        b.set(f"{side}_ankle", _rot(_X, -a))
    b.set("spine1", _rot(_X, 0.5 * a))
    b.trans[:, 1] -= (0.38 + 0.40) * (1 - np.cos(a))


def _walk(b, t, tempo, amp, rng, heading):
    freq, speed = (1.6, 0.9) if tempo == "slow" else (2.2, 1.5)
    speed *= amp
    phase = rng.uniform(0, 2 * math.pi)
    swing = np.sin(2 * math.pi * freq * t + phase)
    hip = math.radians(25.0) * amp * swing
    b.set("left_hip", _rot(_X, -hip))
    b.set("right_hip", _rot(_X, hip))
    b.set("left_knee", _rot(_X, math.radians(35.0) * np.maximum(0.0, swing)))
    b.set("right_knee", _rot(_X, math.radians(35.0) * np.maximum(0.0, -swing)))
    b.pre("left_shoulder", _rot(_X, hip * 0.8))
    b.pre("right_shoulder", _rot(_X, -hip * 0.8))
    facing = np.array([math.sin(heading), 0.0, math.cos(heading)])
    b.trans += speed * t[:, None] * facing
    b.trans[:, 1] += 0.02 * np.abs(np.sin(2 * math.pi * freq * t + phase))


def _make_clip(skeleton, family, side, tempo, spec, rng):
    n = spec.frames
    t = np.arange(n) / spec.fps
    u = np.arange(n) / (n - 1)
    amp = rng.uniform(0.85, 1.15)
    heading = rng.uniform(-spec.heading_range, spec.heading_range)
    b = _ClipBuilder(skeleton, n)
    yaw = np.full(n, heading)
    if family == "raise_arm":
        _raise_arm(b, u, tempo, side, amp, rng)
    elif family == "wave":
        _wave(b, u, tempo, side, amp, rng, t)
    elif family == "squat":
        _squat(b, u, tempo, amp)
    elif family == "turn":
        dur = 1.0 if tempo == "slow" else 0.5
        yaw = yaw + _side_sign(side) * math.radians(90.0) * amp * _smoothstep(u / dur)
    elif family == "walk_forward":
        _walk(b, t, tempo, amp, rng, heading)
    b.set("pelvis", _rot(_Y, yaw))
    return b.frames()


def _caption(family, side, tempo, rng):
    templates = CAPTION_TEMPLATES[family]
    k = int(rng.integers(len(templates)))
    adv = ADVERBS[tempo][int(rng.integers(len(ADVERBS[tempo])))]
    return templates[k].format(side=side or "", adv=adv), k


def generate_dataset(spec, skeleton=None):
    """Deterministic corpus of captioned clips.

    Sided families alternate left/right by index; each family draws from its
    own seed sub-stream so changing one count leaves the other families'
    clips unchanged.
    """
    spec.validate()
    skeleton = skeleton or default_skeleton()
    corpus = []
    for f_idx, family in enumerate(FAMILIES):
        count = int(spec.counts.get(family, 0))
        rng = np.random.default_rng([spec.seed, f_idx])
        for i in range(count):
            side = ("left", "right")[i % 2] if family in SIDED else None
            tempo = TEMPOS[int(rng.integers(2))]
            frames = _make_clip(skeleton, family, side, tempo, spec, rng)
            caption, template = _caption(family, side, tempo, rng)
            meta = {"family": family, "side": side, "tempo": tempo, "template": template}
            corpus.append(MotionSequence(frames, spec.fps, caption, meta))
    return corpus


def mirror_corpus(corpus, skeleton=None):
    """Original clips followed by their sagittal mirrors (captions edited)."""
    skeleton = skeleton or default_skeleton()
    return list(corpus) + [mirror_motion(skeleton, m)[0] for m in corpus]


def static_caption(motion):
    if motion.caption is None:
        return None
    fam = motion.meta.get("family")
    if fam in STATIC_TEMPLATES:
        return STATIC_TEMPLATES[fam].format(side=motion.meta.get("side") or "")
    return motion.caption


def extract_static_pairs(corpus, per_motion, seed):
    """``(caption, pose)`` pairs from uniformly sampled frames with translation zeroed."""
    if not corpus:
        raise EmptyCorpus("cannot extract static pairs from an empty corpus")
    rng = np.random.default_rng([seed, 101])
    pairs = []
    for motion in corpus:
        idx = rng.integers(0, motion.num_frames, size=per_motion)
        caption = static_caption(motion)
        for i in idx:
            pose = motion.frames[i].copy()
            pose[TRANSLATION_SLICE] = 0.0
            pairs.append((caption, pose))
    return pairs


def mark_unconditional(corpus, fraction, seed):
    """Drop the captions of ``floor(fraction * len(corpus))`` seeded-random clips."""
    if not 0.0 <= fraction <= 1.0:
        raise BadSpec(f"fraction must lie in [0, 1], got {fraction}")
    k = int(math.floor(fraction * len(corpus)))
    chosen = set(np.random.default_rng([seed, 202]).permutation(len(corpus))[:k].tolist())
    return [m.with_(caption=None) if i in chosen else m for i, m in enumerate(corpus)]


@dataclass(frozen=True, eq=False)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    STD_FLOOR = 1e-6

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def compute_stats(corpus):
    if not corpus:
        raise EmptyCorpus("cannot compute statistics of an empty corpus")
    frames = np.concatenate([m.frames for m in corpus], axis=0)
    mean = frames.mean(axis=0)
    std = np.maximum(frames.std(axis=0), ChannelStats.STD_FLOOR)
    return ChannelStats(mean, std)


def _bcast(v, x, axis):
    shape = [1] * np.ndim(x)
    shape[axis] = -1
    return v.reshape(shape)


def standardize(x, stats, axis=-1):
    """Per-channel z-scoring; ``axis`` is the 135-channel axis of ``x``."""
    return (x - _bcast(stats.mean, x, axis)) / _bcast(stats.std, x, axis)


def destandardize(x, stats, axis=-1):
    return x * _bcast(stats.std, x, axis) + _bcast(stats.mean, x, axis)


def save_motion(motion, path):
    """Write a motion as a JSON object with one frame per line."""
    head = {"caption": motion.caption, "fps": float(motion.fps)}
    if motion.meta:
        head["meta"] = motion.meta
    parts = ["{"]
    for key in sorted(head):
        parts.append(f"{json.dumps(key)}: {json.dumps(head[key], sort_keys=True)},")
    parts.append('"frames": [')
    rows = [json.dumps([float(v) for v in row]) for row in motion.frames]
    parts.append(",\n".join(rows))
    parts.append("]")
    parts.append("}")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8", newline="\n")


def load_motion(path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ParseError(f"{path}: expected a JSON object")
    for key in ("fps", "frames"):
        if key not in obj:
            raise ParseError(f"{path}: missing required key {key!r}")
    fps = obj["fps"]
    if not isinstance(fps, (int, float)) or isinstance(fps, bool) or not fps > 0:
        raise ParseError(f"{path}: field 'fps' must be a positive number, got {fps!r}")
    caption = obj.get("caption")
    if caption is not None and not isinstance(caption, str):
        raise ParseError(f"{path}: field 'caption' must be a string or null")
    frames = obj["frames"]
    if not isinstance(frames, list) or not frames:
        raise ParseError(f"{path}: field 'frames' must be a non-empty array")
    # frames start on the line after '"frames": ['
    first_line = text.splitlines().index('"frames": [') + 2 if '"frames": [' in text.splitlines() else None
    for i, row in enumerate(frames):
        if not isinstance(row, list) or len(row) != POSE_DIM:
            n = len(row) if isinstance(row, list) else "non-array"
            where = f" (line {first_line + i})" if first_line else ""
            raise ParseError(f"{path}: frame {i}{where}: expected {POSE_DIM} values, got {n}")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in row):
            raise ParseError(f"{path}: frame {i}: non-numeric or non-finite value")
    return MotionSequence(np.asarray(frames, dtype=np.float64), float(fps), caption, obj.get("meta") or {})


MANIFEST = "manifest.txt"
STATS_FILE = "stats.json"


def write_dataset(root, splits, stats=None):
    """Write ``{split: [MotionSequence]}`` under ``root`` plus a manifest and optional stats."""
    root = Path(root)
    lines = []
    for split in sorted(splits):
        (root / split).mkdir(parents=True, exist_ok=True)
        for i, motion in enumerate(splits[split]):
            label = (motion.meta or {}).get("family", "motion")
            rel = f"{split}/{i:05d}_{label}.json"
            save_motion(motion, root / rel)
            lines.append(f"{rel}\t{split}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    if stats is not None:
        save_stats(stats, root / STATS_FILE)


def read_manifest(root):
    root = Path(root)
    path = root / MANIFEST
    entries = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"{path}: line {n}: expected '<path>\\t<split>'")
        entries.append((parts[0], parts[1]))
    return entries


def read_dataset(root, splits=None):
    """Load motions listed in the manifest, optionally filtered by split tag.

    Returns a list of ``(relative_path, MotionSequence)`` in manifest order.
    """
    root = Path(root)
    wanted = None if splits is None else set([splits] if isinstance(splits, str) else splits)
    return [(rel, load_motion(root / rel)) for rel, split in read_manifest(root) if wanted is None or split in wanted]


def save_stats(stats, path):
    Path(path).write_text(json.dumps(stats.to_dict(), sort_keys=True) + "\n", encoding="utf-8")


def load_stats(path):
    return ChannelStats.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
