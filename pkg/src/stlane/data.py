"""Synthetic lane sequences, stride sampling, augmentation and the on-disk format.

Dataset layout (all paths in the index are relative to its directory)::

    <root>/index.txt
    <root>/clips/clip_0000/frame_01.png ... frame_LL.png   8-bit RGB
    <root>/clips/clip_0000/mask.png                        8-bit L, nonzero = lane

Each index line holds N frame paths followed by one mask path, separated by
whitespace. The mask belongs to the last listed frame.

Randomness comes exclusively from Philox4x64 generators (``stlane.nn.make_rng``);
entry ``i`` of a corpus generated from ``seed`` uses the sub-seed
``subseed(seed, i)``, so generation order does not affect the output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .nn import make_rng

log = logging.getLogger(__name__)

CHALLENGES = ("occlusion", "shadow", "brightness", "blur")


@dataclass(frozen=True)
class Lane:
    """Image-space centreline ``x(t) = c + b*t + a*t**2``, t in [0, 1] from top to bottom of the road."""

    a: float
    b: float
    c: float
    width: float = 3.0
    dash: tuple[int, int] | None = None  # (on, off) rows; None = solid
    color: tuple[float, float, float] = (0.95, 0.95, 0.95)


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    frames: int
    lanes: tuple[Lane, ...]
    horizon: float = 0.35
    drift: float = 0.0           # lateral pixels per frame
    scale: float = 0.0           # relative spread change per frame
    dash_speed: float = 2.0      # rows per frame the dash pattern moves
    occlusions: tuple[tuple[int, int, int, int], ...] = ()  # (y0, x0, y1, x1) on the last frame
    occlusion_frames: tuple[int, ...] | None = None  # 0-based frame indices; None = last only
    shadow: tuple[int, int] | None = None            # (y0, y1) rows darkened in every frame
    brightness: float = 1.0
    blur: bool = False
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 1 <= len(self.lanes) <= 8:
            raise ValueError(f"scene needs 1-8 lanes, got {len(self.lanes)}")
        if self.frames < 1:
            raise ValueError("scene needs at least one frame")

    @property
    def road_top(self) -> int:
        return int(round(self.horizon * self.height))

    def clean(self) -> "SceneSpec":
        return replace(self, occlusions=(), shadow=None, brightness=1.0, blur=False)


@dataclass
class ImageSequence:
    frames: np.ndarray          # (N, 3, H, W) float32 in [0, 1]
    mask: np.ndarray            # (H, W) uint8 {0, 1}, label of the last frame
    source_id: str = ""
    region: np.ndarray | None = field(default=None, repr=False)  # optional eval region (e.g. occluded pixels)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"{self.source_id}: frames must be (N, 3, H, W), got {self.frames.shape}")
        if self.mask.shape != self.frames.shape[2:]:
            raise ValueError(f"{self.source_id}: mask {self.mask.shape} not aligned to frames {self.frames.shape}")

    @property
    def n(self) -> int:
        return self.frames.shape[0]

    def tail(self, n: int) -> "ImageSequence":
        """The last ``n`` frames with the same label (``tail(1)`` is the single-frame view)."""
        if not 1 <= n <= self.n:
            raise ValueError(f"{self.source_id}: cannot take {n} of {self.n} frames")
        return ImageSequence(self.frames[-n:], self.mask, self.source_id, self.region)


def subseed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0] >> 1)


# --------------------------------------------------------------------------
# rendering

def lane_centres(lane: Lane, spec: SceneSpec, k: int) -> np.ndarray:
    """Centreline x for every image row in frame ``k`` (NaN above the road)."""
    top = spec.road_top
    rows = np.arange(spec.height, dtype=np.float64)
    t = (rows - top) / max(spec.height - 1 - top, 1)
    x = lane.c + lane.b * t + lane.a * t * t
    offset = k - (spec.frames - 1)
    vp = lane.c
    x = vp + (x - vp) * (1.0 + spec.scale * offset) + spec.drift * offset
    x[rows < top] = np.nan
    return x


def _dash_on(lane: Lane, spec: SceneSpec, k: int) -> np.ndarray:
    rows = np.arange(spec.height)
    if lane.dash is None:
        return np.ones(spec.height, dtype=bool)
    on, off = lane.dash
    phase = spec.dash_speed * (k - (spec.frames - 1))
    return np.mod(rows - phase, on + off) < on


def lane_coverage(lane: Lane, spec: SceneSpec, k: int) -> np.ndarray:
    """Anti-aliased (horizontal distance) coverage in [0, 1], shape (H, W)."""
    xc = lane_centres(lane, spec, k)
    cols = np.arange(spec.width, dtype=np.float64)
    dist = np.abs(cols[None, :] - xc[:, None])
    cov = np.clip(lane.width / 2 + 0.5 - dist, 0.0, 1.0)
    cov[np.isnan(cov)] = 0.0
    cov *= _dash_on(lane, spec, k)[:, None]
    return cov


def check_geometry(spec: SceneSpec) -> None:
    for i, lane in enumerate(spec.lanes):
        if not 1 <= lane.width <= 6:
            raise ValueError(f"lane {i}: width {lane.width} outside 1-6 px")
        for k in range(spec.frames):
            xc = lane_centres(lane, spec, k)
            xc = xc[~np.isnan(xc)]
            half = lane.width / 2
            if xc.min() - half < 0 or xc.max() + half > spec.width - 1:
                raise ValueError(f"degenerate geometry: lane {i} leaves the image in frame {k}")


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    top = spec.road_top
    img = np.empty((h, w, 3))
    rows = np.arange(h, dtype=np.float64)
    sky = 0.75 - 0.15 * rows / max(top, 1)
    road = 0.28 + 0.17 * (rows - top) / max(h - top, 1)
    tone = np.where(rows < top, sky, road)
    img[:] = tone[:, None, None]
    img[:top, :, 2] += 0.1
    img += spec.noise * rng.standard_normal((h, w, 3))
    return img


def render_frames(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Clean render. Returns frames (N, H, W, 3) and the last-frame mask (H, W)."""
    check_geometry(spec)
    rng = make_rng(spec.seed)
    frames = np.empty((spec.frames, spec.height, spec.width, 3))
    mask = np.zeros((spec.height, spec.width), dtype=np.uint8)
    for k in range(spec.frames):
        img = _background(spec, rng)
        for lane in spec.lanes:
            cov = lane_coverage(lane, spec, k)[..., None]
            img = img * (1 - cov) + np.asarray(lane.color) * cov
            if k == spec.frames - 1:
                mask |= (cov[..., 0] >= 0.5).astype(np.uint8)
        frames[k] = img
    return frames, mask


def apply_challenges(frames: np.ndarray, spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt rendered frames; returns frames and the boolean occluded region of the last frame."""
    frames = frames.copy()
    region = np.zeros(frames.shape[1:3], dtype=bool)
    occ_frames = (spec.frames - 1,) if spec.occlusion_frames is None else spec.occlusion_frames
    for y0, x0, y1, x1 in spec.occlusions:
        for k in occ_frames:
            frames[k, y0:y1, x0:x1] = (0.12, 0.12, 0.14)
        if spec.frames - 1 in occ_frames:
            region[y0:y1, x0:x1] = True
    if spec.shadow is not None:
        y0, y1 = spec.shadow
        frames[:, y0:y1] *= 0.45
    if spec.brightness != 1.0:
        frames *= spec.brightness
    if spec.blur:
        frames = ndimage.uniform_filter(frames, size=(1, 3, 3, 1), mode="nearest")
    return frames, region


def generate_sequence(spec: SceneSpec, source_id: str | None = None) -> ImageSequence:
    """Render a scene. The mask is the clean lane geometry of the last frame."""
    frames, mask = render_frames(spec)
    frames, region = apply_challenges(frames, spec)
    frames = np.clip(frames, 0.0, 1.0).transpose(0, 3, 1, 2).astype(np.float32)
    return ImageSequence(frames, mask, source_id or f"scene_{spec.seed}",
                         region if region.any() else None)


def random_scene(seed: int, height: int = 128, width: int = 256, frames: int = 5,
                 lane_count: int | None = None, challenges: tuple[str, ...] = (),
                 max_tries: int = 100, dashed: bool | None = None, drift: float | None = None) -> SceneSpec:
    """Draw a valid scene; geometry is re-drawn until it stays inside the image."""
    for c in challenges:
        if c not in CHALLENGES:
            raise ValueError(f"unknown challenge {c!r}; choose from {CHALLENGES}")
    rng = make_rng(seed)
    for _ in range(max_tries):
        n_lanes = lane_count or int(rng.integers(2, 5))
        vp = width * (0.5 + 0.08 * rng.uniform(-1, 1))
        spread = width * rng.uniform(0.55, 0.85)
        bottoms = vp + spread * (np.linspace(-0.5, 0.5, n_lanes) + rng.uniform(-0.06, 0.06, n_lanes))
        lanes = []
        for xb in bottoms:
            curv = width * rng.uniform(-0.08, 0.08)
            lane_w = float(rng.uniform(2.0, 4.0))
            use_dash = rng.uniform() < 0.4 if dashed is None else dashed
            dash = (int(rng.integers(6, 12)), int(rng.integers(4, 10))) if use_dash else None
            color = (0.95, 0.95, 0.95) if rng.uniform() < 0.7 else (0.95, 0.8, 0.2)
            lanes.append(Lane(a=-curv, b=xb - vp + curv, c=vp, width=lane_w, dash=dash, color=color))
        occ = ()
        if "occlusion" in challenges:
            oh = int(height * rng.uniform(0.3, 0.5))
            ow = int(width * rng.uniform(0.25, 0.4))
            y0 = height - oh - int(rng.integers(0, max(1, height // 8)))
            x0 = int(rng.integers(0, width - ow))
            occ = ((y0, x0, y0 + oh, x0 + ow),)
        spec = SceneSpec(
            height=height, width=width, frames=frames, lanes=tuple(lanes),
            horizon=float(rng.uniform(0.3, 0.4)),
            drift=float(rng.uniform(-1.0, 1.0)) if drift is None else drift,
            scale=float(rng.uniform(-0.01, 0.01)),
            occlusions=occ,
            shadow=(int(height * 0.5), int(height * 0.7)) if "shadow" in challenges else None,
            brightness=float(rng.uniform(0.6, 1.4)) if "brightness" in challenges else 1.0,
            blur="blur" in challenges,
            seed=int(rng.integers(0, 2**62)),
        )
        try:
            check_geometry(spec)
        except ValueError:
            continue
        return spec
    raise ValueError(f"could not draw an in-bounds scene after {max_tries} tries (seed {seed})")


# --------------------------------------------------------------------------
# sampling and augmentation

def sample_with_stride(last: int, n: int, stride: int) -> list[int]:
    """1-based frame indices ``[L-(N-1)s, ..., L-s, L]`` ending at the labeled frame."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if n < 1:
        raise ValueError(f"need at least one frame, got {n}")
    first = last - (n - 1) * stride
    if first < 1:
        raise ValueError(f"clip too short: labeled frame {last} with N={n}, stride={stride}")
    return list(range(first, last + 1, stride))


class EmptyMaskError(ValueError):
    """Augmentation pushed every lane pixel out of the frame."""


def hflip(seq: ImageSequence) -> ImageSequence:
    region = None if seq.region is None else seq.region[:, ::-1].copy()
    return ImageSequence(seq.frames[..., ::-1].copy(), seq.mask[:, ::-1].copy(), seq.source_id + "+hflip", region)


def rotate(seq: ImageSequence, degrees: float) -> ImageSequence:
    frames = ndimage.rotate(seq.frames, degrees, axes=(3, 2), reshape=False, order=1, mode="nearest")
    mask = ndimage.rotate(seq.mask, degrees, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0)
    region = None
    if seq.region is not None:
        region = ndimage.rotate(seq.region.astype(np.uint8), degrees, axes=(1, 0), reshape=False, order=0) > 0
    return _checked(ImageSequence(np.clip(frames, 0, 1).astype(np.float32), mask.astype(np.uint8),
                                  f"{seq.source_id}+rot{degrees:+.1f}", region))


def crop_resize(seq: ImageSequence, box: tuple[int, int, int, int]) -> ImageSequence:
    """Crop ``(y0, x0, y1, x1)`` and resize back to the original size."""
    y0, x0, y1, x1 = box
    h, w = seq.mask.shape
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
        raise ValueError(f"crop box {box} outside {h}x{w}")
    zoom = (h / (y1 - y0), w / (x1 - x0))
    frames = ndimage.zoom(seq.frames[:, :, y0:y1, x0:x1], (1, 1, *zoom), order=1, mode="nearest", grid_mode=True)
    mask = ndimage.zoom(seq.mask[y0:y1, x0:x1], zoom, order=0, mode="nearest", grid_mode=True)
    region = None
    if seq.region is not None:
        region = ndimage.zoom(seq.region[y0:y1, x0:x1].astype(np.uint8), zoom, order=0, grid_mode=True) > 0
    return _checked(ImageSequence(np.clip(frames, 0, 1).astype(np.float32), mask.astype(np.uint8),
                                  f"{seq.source_id}+crop", region))


def _checked(seq: ImageSequence) -> ImageSequence:
    if not seq.mask.any():
        raise EmptyMaskError(f"{seq.source_id}: augmentation removed every lane pixel")
    return seq


def augment(seq: ImageSequence, op: str, seed: int, max_degrees: float = 5.0,
            min_crop: float = 0.8) -> ImageSequence:
    """Apply one geometric op identically to every frame and the mask."""
    rng = make_rng(seed)
    if op == "hflip":
        return hflip(seq)
    if op == "rotation":
        return rotate(seq, float(rng.uniform(-max_degrees, max_degrees)))
    if op == "crop":
        h, w = seq.mask.shape
        s = rng.uniform(min_crop, 1.0)
        ch, cw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        return crop_resize(seq, (y0, x0, y0 + ch, x0 + cw))
    raise ValueError(f"unknown augmentation {op!r}")


# --------------------------------------------------------------------------
# on-disk format

def to_uint8(frame_chw: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame_chw, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    # uint8 (H, W) -> L, (H, W, 3) -> RGB; fixed settings keep the bytes reproducible
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path, format="PNG", optimize=False,
                                                                      compress_level=6)


def read_png(path: Path, mode: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert(mode))


@dataclass
class DatasetIndex:
    root: Path
    entries: list[tuple[list[str], str]]

    @classmethod
    def read(cls, path) -> "DatasetIndex":
        path = Path(path)
        entries = []
        for line in path.read_text().splitlines():
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            entries.append((parts[:-1], parts[-1]))
        return cls(path.parent, entries)

    def write(self, path) -> None:
        lines = [" ".join(frames + [mask]) for frames, mask in self.entries]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_clip(root: Path, name: str, seq: ImageSequence) -> tuple[list[str], str]:
    """Write every frame plus the last-frame mask; returns relative paths."""
    rel = []
    for k in range(seq.n):
        p = f"clips/{name}/frame_{k + 1:02d}.png"
        write_png(root / p, to_uint8(seq.frames[k]))
        rel.append(p)
    mask_rel = f"clips/{name}/mask.png"
    write_png(root / mask_rel, (seq.mask > 0).astype(np.uint8) * 255)
    return rel, mask_rel


def synthesize(root, num: int, seed: int, height: int, width: int, frames: int,
               clip_length: int | None = None, strides: tuple[int, ...] = (1,),
               challenges: tuple[str, ...] = (), index_name: str = "index.txt") -> DatasetIndex:
    """Generate ``num`` clips and an index with one entry per (clip, stride)."""
    root = Path(root)
    clip_length = clip_length or frames
    entries = []
    for i in range(num):
        spec = random_scene(subseed(seed, i), height, width, clip_length, challenges=challenges)
        seq = generate_sequence(spec, f"clip_{i:04d}")
        paths, mask = write_clip(root, f"clip_{i:04d}", seq)
        for s in strides:
            try:
                idx = sample_with_stride(clip_length, frames, s)
            except ValueError as exc:
                log.warning("clip_%04d stride %d skipped: %s", i, s, exc)
                continue
            entries.append(([paths[j - 1] for j in idx], mask))
    index = DatasetIndex(root, entries)
    index.write(root / index_name)
    return index


@dataclass
class LoadResult:
    sequences: list[ImageSequence]
    errors: list[str]

    @property
    def failures(self) -> int:
        return len(self.errors)

    def __iter__(self):
        return iter(self.sequences)

    def __len__(self) -> int:
        return len(self.sequences)


def load_dataset(index: DatasetIndex, frames: int, height: int | None = None, width: int | None = None,
                 shuffle_seed: int | None = None) -> LoadResult:
    """Decode every entry; bad entries are skipped and reported in ``errors``."""
    sequences, errors = [], []
    for line_no, (frame_paths, mask_path) in enumerate(index.entries, 1):
        try:
            if len(frame_paths) != frames:
                raise ValueError(f"has {len(frame_paths)} frames, expected {frames}")
            imgs = []
            for p in frame_paths:
                full = index.root / p
                if not full.exists():
                    raise FileNotFoundError(f"missing file {p}")
                imgs.append(read_png(full, "RGB"))
            full_mask = index.root / mask_path
            if not full_mask.exists():
                raise FileNotFoundError(f"missing file {mask_path}")
            mask = (read_png(full_mask, "L") > 0).astype(np.uint8)
            shapes = {im.shape[:2] for im in imgs} | {mask.shape}
            if len(shapes) != 1:
                raise ValueError(f"size mismatch between frames/mask: {sorted(shapes)}")
            if height is not None and width is not None and shapes != {(height, width)}:
                raise ValueError(f"size {shapes.pop()} != configured {(height, width)}")
            arr = np.stack(imgs).astype(np.float32).transpose(0, 3, 1, 2) / 255.0
            sequences.append(ImageSequence(arr, mask, f"{index.root.name}:{line_no}"))
        except (OSError, ValueError) as exc:
            msg = f"entry {line_no}: {exc}"
            log.warning(msg)
            errors.append(msg)
    if shuffle_seed is not None:
        order = make_rng(shuffle_seed).permutation(len(sequences))
        sequences = [sequences[i] for i in order]
    return LoadResult(sequences, errors)


def pixel_counts(sequences) -> tuple[int, int]:
    lane = total = 0
    for s in sequences:
        lane += int(np.count_nonzero(s.mask))
        total += s.mask.size
    return lane, total
