"""Synthetic periodic videos with exact cycle annotations.

Each video is a T x 16 x 16 single-channel clip in [0,1]. A motion spec
fixes the family, cycle geometry, and scene clutter; rendering is a pure
function of (spec, seed). Frames outside annotated cycles show the rest
pose, so every motion cycle the renderer produces is annotated.

Also defined here: caption templates for alignment pretraining, the split
of a long video into fixed-length clips with per-clip count labels, the
balanced positive/negative clip sampler, and the dataset container format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .protocol import ClipAnswer

__all__ = [
    "SpecError",
    "DatasetFormatError",
    "DatasetCompositionError",
    "FAMILIES",
    "FAMILY_A",
    "FAMILY_B",
    "FRAME_H",
    "FRAME_W",
    "DEFAULT_CLIP_LEN",
    "MotionSpec",
    "SyntheticVideo",
    "CycleAnnotation",
    "ClipLabel",
    "CaptionPair",
    "generate_video",
    "caption_of",
    "split_frames",
    "split_into_clips",
    "make_stage2_pairs",
    "sample_spec",
    "make_dataset",
    "write_dataset",
    "read_dataset",
]


class SpecError(ValueError):
    """A motion spec violates its invariants."""


class DatasetFormatError(ValueError):
    """Dataset file is malformed; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DatasetCompositionError(ValueError):
    """Dataset lacks material for a requested derived set."""


FAMILIES = (
    "oscillating-square",
    "bouncing-ball",
    "pulsing-blob",
    "rotating-bar",
    "drifting-noise",
)

# Disjoint generator profiles; the cross-domain protocol trains on one
# and evaluates on the other.
FAMILY_A = ("oscillating-square", "pulsing-blob")
FAMILY_B = ("bouncing-ball", "rotating-bar")

FRAME_H = 16
FRAME_W = 16
DEFAULT_CLIP_LEN = 32

# Labels share the answer value type: count of fully contained cycles
# plus the two boundary flags.
ClipLabel = ClipAnswer


@dataclass(frozen=True)
class MotionSpec:
    family: str
    cycle_count: int
    cycle_length_frames: int
    phase_offset_frames: int
    tail_frames: int
    amplitude: float
    noise_level: float
    distractor_count: int

    def __post_init__(self):
        # The container stores these as f32; quantize up front so a
        # write/read round-trip reproduces the spec bit-exactly.
        object.__setattr__(self, "amplitude", float(np.float32(self.amplitude)))
        object.__setattr__(self, "noise_level", float(np.float32(self.noise_level)))

    def validate(self, clip_len: int = DEFAULT_CLIP_LEN):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown motion family {self.family!r}")
        if self.cycle_count < 0:
            raise SpecError("cycle_count must be >= 0")
        if self.cycle_length_frames < 2:
            raise SpecError("cycle_length_frames must be >= 2")
        if self.cycle_length_frames > clip_len:
            raise SpecError(
                f"cycle length {self.cycle_length_frames} exceeds clip length {clip_len}; "
                "a cycle may straddle at most one clip boundary"
            )
        if self.phase_offset_frames < 0:
            raise SpecError("phase_offset_frames must be >= 0")
        if not 0 <= self.tail_frames < self.cycle_length_frames:
            raise SpecError("tail_frames must satisfy 0 <= tail < cycle_length")
        if not 0.0 <= self.noise_level <= 1.0:
            raise SpecError("noise_level must be in [0,1]")
        if self.distractor_count < 0:
            raise SpecError("distractor_count must be >= 0")
        if self.family == "drifting-noise" and self.cycle_count != 0:
            raise SpecError("drifting-noise videos are aperiodic; cycle_count must be 0")
        if self.total_frames < 1:
            raise SpecError("spec describes an empty video")

    @property
    def total_frames(self) -> int:
        return (
            self.phase_offset_frames
            + self.cycle_count * self.cycle_length_frames
            + self.tail_frames
        )


@dataclass
class SyntheticVideo:
    frames: np.ndarray  # T x H x W float32 in [0,1]
    spec: MotionSpec
    seed: int


@dataclass(frozen=True)
class CycleAnnotation:
    count: int
    cycle_intervals: tuple  # ((start, end), ...) half-open, disjoint, sorted


@dataclass(frozen=True)
class CaptionPair:
    video_index: int
    caption: str


def _annotation_for(spec: MotionSpec) -> CycleAnnotation:
    p, L = spec.phase_offset_frames, spec.cycle_length_frames
    intervals = tuple((p + i * L, p + (i + 1) * L) for i in range(spec.cycle_count))
    return CycleAnnotation(count=spec.cycle_count, cycle_intervals=intervals)


def _phase_track(spec: MotionSpec, intervals) -> np.ndarray:
    """Per-frame phase in [0,1); rest frames sit at phase 0."""
    phi = np.zeros(spec.total_frames, dtype=np.float64)
    L = spec.cycle_length_frames
    for a, b in intervals:
        phi[a:b] = np.arange(b - a) / L
    return phi


def _render_family(spec: MotionSpec, phi: np.ndarray, rng) -> np.ndarray:
    T = spec.total_frames
    yy, xx = np.mgrid[0:FRAME_H, 0:FRAME_W].astype(np.float64)
    peak = 0.55 + 0.45 * float(np.clip(spec.amplitude, 0.0, 1.0))
    layer = np.zeros((T, FRAME_H, FRAME_W), dtype=np.float64)

    if spec.family == "oscillating-square":
        cx = FRAME_W / 2 + np.round(4.0 * np.sin(2 * np.pi * phi))
        cy = np.full(T, FRAME_H / 2)
        mask = (np.abs(yy[None] - cy[:, None, None]) <= 2.0) & (
            np.abs(xx[None] - cx[:, None, None]) <= 2.0
        )
        layer[mask] = peak
    elif spec.family == "bouncing-ball":
        cy = 12.0 - 8.0 * np.sin(np.pi * phi)
        cx = np.full(T, FRAME_W / 2)
        d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
        layer[d2 <= 2.2**2] = peak
    elif spec.family == "pulsing-blob":
        sigma = 1.5 + 2.5 * (0.5 - 0.5 * np.cos(2 * np.pi * phi))
        d2 = (yy - FRAME_H / 2) ** 2 + (xx - FRAME_W / 2) ** 2
        layer = peak * np.exp(-d2[None] / (2.0 * sigma[:, None, None] ** 2))
    elif spec.family == "rotating-bar":
        # Half-bar (ray from center) so one visual period is one full turn.
        theta = 2 * np.pi * phi
        ux, uy = np.cos(theta), np.sin(theta)
        dx, dy = xx - FRAME_W / 2, yy - FRAME_H / 2
        along = dx[None] * ux[:, None, None] + dy[None] * uy[:, None, None]
        perp = np.abs(dy[None] * ux[:, None, None] - dx[None] * uy[:, None, None])
        layer[(along >= 0.0) & (along <= 6.0) & (perp <= 1.1)] = peak
    elif spec.family == "drifting-noise":
        # A smoothly wandering field that never revisits a frame: each step
        # shifts the previous frame and blends in fresh noise.
        field = rng.random((FRAME_H, FRAME_W))
        step = rng.integers(-1, 2, size=(T, 2))
        for t in range(T):
            field = 0.75 * np.roll(field, (int(step[t, 0]), int(step[t, 1])), axis=(0, 1))
            field = field + 0.25 * rng.random((FRAME_H, FRAME_W))
            layer[t] = peak * field
    else:  # pragma: no cover - validate() rejects unknown families
        raise SpecError(f"unknown motion family {spec.family!r}")
    return layer


def generate_video(spec: MotionSpec, seed: int):
    """Render one video; returns (SyntheticVideo, CycleAnnotation).

    Deterministic for fixed (spec, seed): all randomness is drawn from one
    seeded generator in a fixed order (background noise, distractors, then
    family-specific draws).
    """
    spec.validate()
    annotation = _annotation_for(spec)
    rng = np.random.default_rng(seed)
    T = spec.total_frames

    noise = rng.random((T, FRAME_H, FRAME_W)) * (0.5 * spec.noise_level)

    clutter = np.zeros((FRAME_H, FRAME_W), dtype=np.float64)
    for _ in range(spec.distractor_count):
        py = int(rng.integers(0, FRAME_H - 1))
        px = int(rng.integers(0, FRAME_W - 1))
        clutter[py : py + 2, px : px + 2] = 0.35

    phi = _phase_track(spec, annotation.cycle_intervals)
    layer = _render_family(spec, phi, rng)

    frames = np.maximum(np.maximum(noise, clutter[None]), layer)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    return SyntheticVideo(frames=frames, spec=spec, seed=int(seed)), annotation


_CAPTION_TEMPLATES = {
    "oscillating-square": "a bright square sliding side to side",
    "bouncing-ball": "a bright ball bouncing up and down",
    "pulsing-blob": "a soft blob pulsing larger and smaller",
    "rotating-bar": "a bright bar rotating around the center",
    "drifting-noise": "a drifting noise field with no repeating motion",
}


def caption_of(spec: MotionSpec) -> str:
    """Templated scene description. Never discloses the cycle count."""
    if spec.family not in _CAPTION_TEMPLATES:
        raise SpecError(f"unknown motion family {spec.family!r}")
    text = _CAPTION_TEMPLATES[spec.family]
    if spec.noise_level > 0.05:
        text += " over a noisy background"
    else:
        text += " over a plain background"
    if spec.distractor_count > 0:
        text += ", with static clutter nearby"
    return text


def _map_interval(a: int, b: int, s: int):
    """Original-frame interval [a,b) -> subsampled-frame interval.

    Subsampled index j covers original frame j*s, so the image of [a,b)
    is [ceil(a/s), ceil(b/s)). Order and disjointness are preserved.
    """
    return (-(-a // s), -(-b // s))


def _clip_labels(intervals, n_frames: int, clip_len: int):
    """Per-clip labels from cycle intervals over n_frames of footage.

    A cycle is credited to the clip that fully contains it; a cycle whose
    interior crosses a clip boundary sets the earlier clip's end flag and
    the later clip's start flag instead.
    """
    n_clips = -(-n_frames // clip_len)
    counts = [0] * n_clips
    starts = [0] * n_clips
    ends = [0] * n_clips
    for a, b in intervals:
        first = a // clip_len
        last = (b - 1) // clip_len
        if first == last:
            counts[first] += 1
        else:
            # cycle_length <= clip_len guarantees at most one boundary.
            ends[first] = 1
            starts[last] = 1
    return [ClipLabel(counts[k], starts[k], ends[k]) for k in range(n_clips)]


def split_frames(frames: np.ndarray, clip_len: int = DEFAULT_CLIP_LEN, sample_interval: int = 1):
    """Window the footage only: subsample, partition, pad the last window.

    This is the label-free half of split_into_clips, usable at inference
    where no annotation exists.
    """
    if frames.shape[0] == 0:
        raise ValueError("cannot split an empty video")
    if clip_len < 2:
        raise ValueError("clip_len must be >= 2")
    if sample_interval < 1:
        raise ValueError("sample_interval must be >= 1")
    sub = frames[::sample_interval]
    windows = []
    for k in range(-(-sub.shape[0] // clip_len)):
        window = sub[k * clip_len : (k + 1) * clip_len]
        if window.shape[0] < clip_len:
            pad = np.repeat(window[-1:], clip_len - window.shape[0], axis=0)
            window = np.concatenate([window, pad], axis=0)
        windows.append(window)
    return windows


def split_into_clips(
    video: SyntheticVideo,
    annotation: CycleAnnotation,
    clip_len: int = DEFAULT_CLIP_LEN,
    sample_interval: int = 1,
):
    """Subsample, then partition into consecutive clip_len windows.

    The last window is padded by repeating its final frame. Returns a list
    of (clip frames, ClipLabel); the labels reconcile exactly back to the
    annotation count.
    """
    windows = split_frames(video.frames, clip_len, sample_interval)
    n = -(-video.frames.shape[0] // sample_interval)
    mapped = [_map_interval(a, b, sample_interval) for a, b in annotation.cycle_intervals]
    for a, b in mapped:
        if b - a < 1 or b - a > clip_len or a >= n:
            raise ValueError(
                f"sample_interval {sample_interval} too coarse for cycle length "
                f"{video.spec.cycle_length_frames}; labels would be ill-defined"
            )
    labels = _clip_labels(mapped, n, clip_len)
    return list(zip(windows, labels))


def make_stage2_pairs(dataset, clip_len: int = DEFAULT_CLIP_LEN, sample_interval: int = 1, seed: int = 0):
    """Balanced (clip, label) pairs: 1 for periodic content, 0 for none.

    A clip is positive when it contains any full cycle or a flagged
    partial one; negatives come from aperiodic videos and cycle-free
    windows of periodic ones. The larger class is subsampled to match the
    smaller, so the returned classes are exactly balanced.
    """
    positives, negatives = [], []
    for video, annotation in dataset:
        for clip, label in split_into_clips(video, annotation, clip_len, sample_interval):
            periodic = label.count >= 1 or label.start_incomplete or label.end_incomplete
            (positives if periodic else negatives).append((clip, 1 if periodic else 0))
    if not positives or not negatives:
        raise DatasetCompositionError(
            f"need both classes for periodicity alignment; got {len(positives)} "
            f"positive and {len(negatives)} negative clips"
        )
    rng = np.random.default_rng(seed)
    rng.shuffle(positives)
    rng.shuffle(negatives)
    k = min(len(positives), len(negatives))
    pairs = positives[:k] + negatives[:k]
    rng.shuffle(pairs)
    return pairs


def sample_spec(rng, profile: str, aperiodic_fraction: float = 0.0) -> MotionSpec:
    """Draw a random spec from a generator profile ("family-a"/"family-b")."""
    families = {"family-a": FAMILY_A, "family-b": FAMILY_B}.get(profile.lower())
    if families is None:
        raise SpecError(f"unknown generator profile {profile!r}")
    if rng.random() < aperiodic_fraction:
        cycle_length = int(rng.integers(8, 17))
        return MotionSpec(
            family="drifting-noise",
            cycle_count=0,
            cycle_length_frames=cycle_length,
            phase_offset_frames=int(rng.integers(24, 57)),
            tail_frames=int(rng.integers(0, cycle_length)),
            amplitude=float(rng.uniform(0.6, 1.0)),
            noise_level=float(rng.uniform(0.0, 0.3)),
            distractor_count=int(rng.integers(0, 4)),
        )
    cycle_length = int(rng.integers(4, 17))
    return MotionSpec(
        family=families[int(rng.integers(0, len(families)))],
        cycle_count=int(rng.integers(1, 9)),
        cycle_length_frames=cycle_length,
        phase_offset_frames=int(rng.integers(0, 7)),
        tail_frames=int(rng.integers(0, min(cycle_length, 8))),
        amplitude=float(rng.uniform(0.6, 1.0)),
        noise_level=float(rng.uniform(0.0, 0.3)),
        distractor_count=int(rng.integers(0, 4)),
    )


def make_dataset(n: int, profile: str, seed: int, aperiodic_fraction: float = 0.0):
    """Generate n (video, annotation) pairs; deterministic for fixed args."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        spec = sample_spec(rng, profile, aperiodic_fraction)
        video, annotation = generate_video(spec, seed=int(rng.integers(0, 2**63)))
        out.append((video, annotation))
    return out


_MAGIC = b"PCNT"
_VERSION = 1
_SPEC_FMT = "<B5I2f"  # family, five u32 fields, two f32 fields
_HDR_FMT = "<4sII"


def write_dataset(path, dataset):
    """Serialize (video, annotation) pairs; see read_dataset for layout."""
    with open(path, "wb") as fh:
        fh.write(struct.pack(_HDR_FMT, _MAGIC, _VERSION, len(dataset)))
        for video, annotation in dataset:
            spec = video.spec
            fh.write(struct.pack("<Q", video.seed))
            fh.write(
                struct.pack(
                    _SPEC_FMT,
                    FAMILIES.index(spec.family),
                    spec.cycle_count,
                    spec.cycle_length_frames,
                    spec.phase_offset_frames,
                    spec.tail_frames,
                    spec.distractor_count,
                    spec.amplitude,
                    spec.noise_level,
                )
            )
            t, h, w = video.frames.shape
            fh.write(struct.pack("<3I", t, h, w))
            fh.write(np.ascontiguousarray(video.frames, dtype="<f4").tobytes())
            fh.write(struct.pack("<I", annotation.count))
            for a, b in annotation.cycle_intervals:
                fh.write(struct.pack("<2I", a, b))


class _Cursor:
    """Tracks the byte offset so format errors can name the fault site."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_dataset(path):
    """Parse a dataset file back into (video, annotation) pairs."""
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read())
    magic, version, n_videos = cur.unpack(_HDR_FMT, "header")
    if magic != _MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", 0)
    if version != _VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}", 4)

    out = []
    for i in range(n_videos):
        (seed,) = cur.unpack("<Q", f"video {i} seed")
        fam, count, length, phase, tail, distractors, amp, noise = cur.unpack(
            _SPEC_FMT, f"video {i} spec"
        )
        if fam >= len(FAMILIES):
            raise DatasetFormatError(f"video {i}: unknown family code {fam}", cur.pos - struct.calcsize(_SPEC_FMT))
        spec = MotionSpec(
            family=FAMILIES[fam],
            cycle_count=count,
            cycle_length_frames=length,
            phase_offset_frames=phase,
            tail_frames=tail,
            amplitude=amp,
            noise_level=noise,
            distractor_count=distractors,
        )
        t, h, w = cur.unpack("<3I", f"video {i} shape")
        raw = cur.take(4 * t * h * w, f"video {i} frames")
        frames = np.frombuffer(raw, dtype="<f4").reshape(t, h, w).copy()
        (ann_count,) = cur.unpack("<I", f"video {i} annotation count")
        intervals = tuple(cur.unpack("<2I", f"video {i} interval {j}") for j in range(ann_count))
        out.append(
            (
                SyntheticVideo(frames=frames, spec=spec, seed=seed),
                CycleAnnotation(count=ann_count, cycle_intervals=intervals),
            )
        )
    if cur.pos != len(cur.data):
        raise DatasetFormatError("trailing bytes after last video", cur.pos)
    return out
