"""Procedural toy videos with scripted ground truth, alt-text corruption and frame sampling.

A clip shows one actor shape (optionally beside a static distractor) performing
one or two actions.  Ground-truth captions follow a fixed grammar so they can
be parsed back into the script; see :func:`render_caption` and
:func:`parse_caption`.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
VERBS = ("moves left", "moves right", "moves up", "moves down", "spins", "stays still")
SPEEDS = ("slowly", "quickly")
STATIC_PHRASE = "is in the scene"

RGB = {
    "red": (0.95, 0.12, 0.1),
    "green": (0.1, 0.85, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.1),
}

# verb of the first action -> cause of switching to the second
CAUSE_RULES = {
    "moves left": "reached-wall",
    "moves right": "reached-wall",
    "moves up": "reached-wall",
    "moves down": "reached-wall",
    "spins": "got-dizzy",
    "stays still": "was-pushed",
}
CAUSE_PHRASES = {
    "reached-wall": "because it reached the wall",
    "got-dizzy": "because it got dizzy",
    "was-pushed": "because it was pushed",
}

FRAME_SIZE = 16
SOURCE_FPS = 8.0
SOURCE_FRAMES = 32
RADIUS = 2.5
MOVE_STEP = {"slowly": 0.12, "quickly": 0.3}  # pixels per source frame
SPIN_STEP = {"slowly": 0.12, "quickly": 0.3}  # radians per source frame
DIRECTIONS = {"moves left": (-1, 0), "moves right": (1, 0), "moves up": (0, -1), "moves down": (0, 1)}
VIDEO_BLUR = (0.2, 0.6, 0.2)
VIDEO_CONTRAST = 0.6
VIDEO_TINT = 0.25
VIDEO_NOISE = 0.05
N_CAMERAS = 8  # sensor noise and backdrop come from a small shared pool, not from each clip
LO, HI = RADIUS, FRAME_SIZE - 1 - RADIUS  # allowed centre range (pixel-centre coordinates)

VDCL_MAGIC = b"VDCL"


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str


@dataclass(frozen=True)
class Action:
    verb: str
    speed: str

    @property
    def phrase(self) -> str:
        return f"{self.verb} {self.speed}"


@dataclass(frozen=True)
class SceneScript:
    objects: tuple[SceneObject, ...]
    actions: tuple[Action, ...]
    cause: str | None = None

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 2:
            raise ValueError("a script has one or two objects")
        if not 1 <= len(self.actions) <= 2:
            raise ValueError("a script has one or two actions")
        if len(self.actions) == 2 and self.actions[0].verb == self.actions[1].verb:
            raise ValueError("the two actions must use different verbs")
        if (self.cause is not None) != (len(self.actions) == 2):
            raise ValueError("cause tag present iff there are two actions")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS:
                raise ValueError(f"unknown object {o}")
        for a in self.actions:
            if a.verb not in VERBS or a.speed not in SPEEDS:
                raise ValueError(f"unknown action {a}")

    @property
    def actor(self) -> SceneObject:
        return self.objects[0]

    def to_json(self) -> dict:
        return {
            "objects": [asdict(o) for o in self.objects],
            "actions": [asdict(a) for a in self.actions],
            "cause": self.cause,
        }

    @classmethod
    def from_json(cls, obj: dict) -> SceneScript:
        return cls(
            tuple(SceneObject(**o) for o in obj["objects"]),
            tuple(Action(**a) for a in obj["actions"]),
            obj.get("cause"),
        )


def make_script(obj: SceneObject, actions: Iterable[Action], distractor: SceneObject | None = None) -> SceneScript:
    actions = tuple(actions)
    cause = CAUSE_RULES[actions[0].verb] if len(actions) == 2 else None
    objects = (obj,) if distractor is None else (obj, distractor)
    return SceneScript(objects, actions, cause)


# ---------------------------------------------------------------------------
# Caption grammar
# ---------------------------------------------------------------------------

def render_caption(script: SceneScript) -> str:
    a = script.actor
    text = f"a {a.color} {a.shape} {script.actions[0].phrase}"
    if len(script.actions) == 2:
        text += f", then {script.actions[1].phrase}"
    return text


_VERB_RE = "|".join(re.escape(v) for v in VERBS)
_CAPTION_RE = re.compile(
    rf"^a ({'|'.join(COLORS)}) ({'|'.join(SHAPES)}) ({_VERB_RE}) ({'|'.join(SPEEDS)})"
    rf"(?:, then ({_VERB_RE}) ({'|'.join(SPEEDS)}))?$"
)


def parse_caption(text: str) -> SceneScript | None:
    """Inverse of :func:`render_caption` for the actor and actions; ``None`` if off-grammar."""
    m = _CAPTION_RE.match(text.strip())
    if not m:
        return None
    color, shape, v1, s1, v2, s2 = m.groups()
    actions = [Action(v1, s1)]
    if v2 is not None:
        if v2 == v1:
            return None
        actions.append(Action(v2, s2))
    return make_script(SceneObject(shape, color), actions)


def corrupt_alt_text(caption: str, seed: int, drop_rate: float, swap_rate: float) -> str:
    """Web-style noise: drop the verb phrase (static bias) and/or swap the colour (irrelevance)."""
    if not (0 <= drop_rate <= 1 and 0 <= swap_rate <= 1):
        raise ValueError("corruption rates must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    drop = rng.random() < drop_rate
    swap = rng.random() < swap_rate
    words = caption.split(" ")
    if len(words) < 3 or words[0] != "a":
        return caption
    color, shape, rest = words[1], words[2], " ".join(words[3:])
    if swap and color in COLORS:
        others = [c for c in COLORS if c != color]
        color = others[int(rng.integers(len(others)))]
    if drop:
        rest = STATIC_PHRASE
    return f"a {color} {shape} {rest}"


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

@dataclass
class VideoClip:
    frames: np.ndarray  # (F, 3, H, W) in [0, 1]
    timestamps: np.ndarray  # seconds
    script: SceneScript
    id: str

    def __post_init__(self):
        if len(self.frames) != len(self.timestamps):
            raise ValueError("frame count and timestamp count differ")


def _segments(n_actions: int, n_frames: int) -> list[range]:
    if n_actions == 1:
        return [range(n_frames)]
    half = n_frames // 2
    return [range(half), range(half, n_frames)]


def trajectory(script: SceneScript, rng: np.random.Generator, n_frames: int = SOURCE_FRAMES) -> np.ndarray:
    """Per-frame ``(x, y, angle)`` of the actor.

    Frame ``f`` advances by the step of the action whose segment contains it;
    a first-action move in a two-action script ends exactly at the wall.
    """
    segs = _segments(len(script.actions), n_frames)
    inc = np.zeros((n_frames, 3))
    for act, seg in zip(script.actions, segs):
        dx, dy = DIRECTIONS.get(act.verb, (0, 0))
        v = MOVE_STEP[act.speed]
        spin = SPIN_STEP[act.speed] if act.verb == "spins" else 0.0
        for f in seg:
            if f > 0:
                inc[f] = (dx * v, dy * v, spin)
    cum = np.cumsum(inc, axis=0)

    start = np.zeros(3)
    first = script.actions[0]
    pinned = [False, False]
    if len(script.actions) == 2 and first.verb in DIRECTIONS:
        end = segs[0][-1]
        for axis, d in enumerate(DIRECTIONS[first.verb]):
            if d:
                wall = HI if d > 0 else LO
                start[axis] = wall - cum[end, axis]
                pinned[axis] = True
    for axis in (0, 1):
        if not pinned[axis]:
            lo, hi = LO - cum[:, axis].min(), HI - cum[:, axis].max()
            start[axis] = rng.uniform(lo, hi)
    start[2] = rng.uniform(0, 2 * np.pi)
    return start + cum


def _sdf(shape: str, px: np.ndarray, py: np.ndarray, cx: float, cy: float, th: float) -> np.ndarray:
    dx, dy = px - cx, py - cy
    if shape == "circle":
        return np.sqrt(dx * dx + dy * dy) - RADIUS
    c, s = np.cos(th), np.sin(th)
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    if shape == "square":
        return np.maximum(np.abs(lx), np.abs(ly)) - RADIUS * 0.85
    # equilateral triangle, circumradius 1.25 * RADIUS
    d = None
    for k in range(3):
        ang = np.pi / 2 + 2 * np.pi * k / 3
        proj = lx * np.cos(ang) + ly * np.sin(ang)
        d = proj if d is None else np.maximum(d, proj)
    return d - 0.5 * 1.25 * RADIUS


def camera_of(seed: int) -> int:
    return seed % N_CAMERAS


def background(seed: int, size: int = FRAME_SIZE) -> np.ndarray:
    rng = np.random.default_rng([camera_of(seed), 7])
    base = 0.12 + 0.05 * rng.random((3, size, size))
    return base


def _draw(canvas: np.ndarray, obj: SceneObject, x: float, y: float, th: float) -> None:
    size = canvas.shape[-1]
    py, px = np.mgrid[0:size, 0:size].astype(float)
    alpha = np.clip(0.5 - _sdf(obj.shape, px, py, x, y, th), 0.0, 1.0)
    mx, my = x + 0.55 * RADIUS * np.cos(th), y + 0.55 * RADIUS * np.sin(th)
    marker = np.clip(0.5 - (np.sqrt((px - mx) ** 2 + (py - my) ** 2) - 0.8), 0.0, 1.0) * alpha
    rgb = np.asarray(RGB[obj.color])[:, None, None]
    fill = rgb * (1.0 - 0.6 * marker)
    canvas[:] = canvas * (1 - alpha) + fill * alpha


def _distractor_pose(rng: np.random.Generator, actor_xy: np.ndarray) -> tuple[float, float, float]:
    for _ in range(64):
        x, y = rng.uniform(LO, HI, size=2)
        if np.min(np.hypot(actor_xy[:, 0] - x, actor_xy[:, 1] - y)) > 2 * RADIUS + 1:
            return x, y, 0.0
    return x, y, 0.0


def _render(script: SceneScript, seed: int, n_frames: int, which: Iterable[int]) -> np.ndarray:
    rng = np.random.default_rng([seed, 11])
    traj = trajectory(script, rng, n_frames)
    bg = background(seed)
    dpose = _distractor_pose(rng, traj[:, :2]) if len(script.objects) == 2 else None
    out = []
    for f in which:
        canvas = bg.copy()
        if dpose is not None:
            _draw(canvas, script.objects[1], *dpose)
        _draw(canvas, script.actor, *traj[f])
        out.append(canvas)
    return np.clip(np.stack(out), 0.0, 1.0)


def video_degrade(frames: np.ndarray, seed: int) -> np.ndarray:
    """Camera-and-codec look of video frames: blur, washed-out contrast, per-clip tint and fixed-pattern noise.

    The tint is drawn per clip, the fixed-pattern noise per camera. Nothing varies over time, so
    identical input frames stay identical.
    """
    rng = np.random.default_rng([seed, 13])
    k = np.asarray(VIDEO_BLUR)
    x = np.pad(frames, [(0, 0)] * (frames.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    x = k[0] * x[..., :-2, :] + k[1] * x[..., 1:-1, :] + k[2] * x[..., 2:, :]
    x = k[0] * x[..., :-2] + k[1] * x[..., 1:-1] + k[2] * x[..., 2:]
    tint = rng.uniform(1.0 - VIDEO_TINT, 1.0, size=(3, 1, 1))
    noise = np.random.default_rng([camera_of(seed), 17]).normal(0.0, VIDEO_NOISE, size=frames.shape[-3:])
    x = 0.5 + VIDEO_CONTRAST * (x * tint - 0.5) + noise
    return np.clip(x, 0.0, 1.0)


def render_clip(script: SceneScript, seed: int, clip_id: str = "clip", n_frames: int = SOURCE_FRAMES,
                fps: float = SOURCE_FPS) -> VideoClip:
    """Rasterise the script into ``n_frames`` video-style RGB frames (4 s at 8 fps by default)."""
    frames = video_degrade(_render(script, seed, n_frames, range(n_frames)), seed)
    return VideoClip(frames, np.arange(n_frames) / fps, script, clip_id)


def render_clean(script: SceneScript, seed: int, n_frames: int = SOURCE_FRAMES) -> np.ndarray:
    """The same scene without the video look: the clean source domain the base model is pretrained on."""
    return _render(script, seed, n_frames, range(n_frames))


def gen_bursts(seed: int, n: int, T: int, fps: float, p_two_objects: float = 0.2,
               p_two_actions: float = 0.5) -> tuple[np.ndarray, list[str]]:
    """``n`` clean frame sequences from an independent script stream, with ground-truth captions.

    Returns frames ``(n, T, 3, H, W)`` sampled like video frames, and captions.
    """
    idx = sample_indices(np.arange(SOURCE_FRAMES) / SOURCE_FPS, T, fps)
    frames, captions = [], []
    for i in range(n):
        cs = int(np.random.SeedSequence([seed, i, 3]).generate_state(1)[0])
        script = sample_script(np.random.default_rng(cs), p_two_objects, p_two_actions)
        frames.append(_render(script, cs, SOURCE_FRAMES, idx))
        captions.append(render_caption(script))
    return np.stack(frames), captions


def sample_frames(clip: VideoClip, T: int, fps: float) -> np.ndarray:
    """Frames nearest to ``0, 1/fps, 2/fps, ...``; past the end, the last frame repeats."""
    if len(clip.frames) == 0:
        raise ValueError(f"clip {clip.id} has no frames")
    return clip.frames[sample_indices(clip.timestamps, T, fps)]


def sample_indices(timestamps: np.ndarray, T: int, fps: float) -> np.ndarray:
    if T < 1 or fps <= 0:
        raise ValueError("need T >= 1 and fps > 0")
    if len(timestamps) == 0:
        raise ValueError("empty clip")
    targets = np.arange(T) / fps
    idx = np.abs(timestamps[None, :] - targets[:, None]).argmin(axis=1)
    idx[targets > timestamps[-1]] = len(timestamps) - 1
    return idx


# ---------------------------------------------------------------------------
# World generation and manifest I/O
# ---------------------------------------------------------------------------

@dataclass
class WorldParams:
    n_clips: int = 2000
    # adapt = labelled short-caption set, corpus = unlabelled web-style set, test = held-out evaluation
    split_fractions: dict = field(default_factory=lambda: {"adapt": 0.25, "corpus": 0.65, "test": 0.10})
    p_two_objects: float = 0.2
    p_two_actions: float = 0.5
    drop_rate: float = 0.5
    swap_rate: float = 0.3


CAPTION_SOURCES = ("ground-truth", "alt-text", "pseudo")


def clip_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def sample_script(rng: np.random.Generator, p_two_objects: float, p_two_actions: float) -> SceneScript:
    actor = SceneObject(SHAPES[rng.integers(3)], COLORS[rng.integers(4)])
    distractor = None
    if rng.random() < p_two_objects:
        distractor = SceneObject(SHAPES[rng.integers(3)], COLORS[rng.integers(4)])
    verbs = rng.permutation(len(VERBS))
    n = 2 if rng.random() < p_two_actions else 1
    actions = [Action(VERBS[verbs[i]], SPEEDS[rng.integers(2)]) for i in range(n)]
    return make_script(actor, actions, distractor)


def _assign_splits(n: int, fractions: dict, rng: np.random.Generator) -> list[str]:
    names = list(fractions)
    counts = [int(round(fractions[k] * n)) for k in names]
    counts[names.index("corpus")] += n - sum(counts)
    labels = [name for name, c in zip(names, counts) for _ in range(c)]
    order = rng.permutation(n)
    return [labels[i] for i in np.argsort(order)]


@dataclass
class DatasetManifest:
    records: list[dict]
    seed: int
    params: dict

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r.get("split") == name]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def gen_world(seed: int, n_clips: int, params: WorldParams | None = None) -> DatasetManifest:
    """Draw ``n_clips`` scripts under ``seed`` with ground-truth and corrupted alt-text captions."""
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    params = params or WorldParams(n_clips=n_clips)
    splits = _assign_splits(n_clips, params.split_fractions, np.random.default_rng([seed, 1]))
    records = []
    for i in range(n_clips):
        cs = clip_seed(seed, i)
        rng = np.random.default_rng(cs)
        script = sample_script(rng, params.p_two_objects, params.p_two_actions)
        gt = render_caption(script)
        alt = corrupt_alt_text(gt, cs ^ 0x5A5A, params.drop_rate, params.swap_rate)
        records.append({
            "id": f"clip{i:05d}",
            "seed": cs,
            "split": splits[i],
            "script": script.to_json(),
            "captions": [{"text": gt, "source": "ground-truth"}, {"text": alt, "source": "alt-text"}],
            "frames_path": f"frames/clip{i:05d}.vdcl",
        })
    return DatasetManifest(records, seed, asdict(params) | {"n_clips": n_clips})


def write_frames(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    header = VDCL_MAGIC + struct.pack("<I", frames.ndim) + struct.pack(f"<{frames.ndim}I", *frames.shape)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(frames.tobytes())


def read_frames(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != VDCL_MAGIC:
        raise ValueError(f"{path}: not a VDCL frame file")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    offset = 8 + 4 * ndim
    data = np.frombuffer(raw, dtype="<f4", offset=offset)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload size {data.size} does not match header dims {dims}")
    return data.reshape(dims).astype(np.float64)


def materialize(manifest: DatasetManifest, root) -> None:
    """Render every clip and write its frames under ``root``."""
    root = Path(root)
    for r in manifest.records:
        clip = render_clip(SceneScript.from_json(r["script"]), r["seed"], r["id"])
        write_frames(root / r["frames_path"], clip.frames)


def load_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_manifest(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def load_clip(record: dict, root) -> VideoClip:
    frames = read_frames(Path(root) / record["frames_path"])
    return VideoClip(frames, np.arange(len(frames)) / SOURCE_FPS, SceneScript.from_json(record["script"]), record["id"])


def captions_of(record: dict, source: str) -> list[str]:
    return [c["text"] for c in record["captions"] if c["source"] == source]
