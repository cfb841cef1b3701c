"""Procedural motion-blurred hand samples with exact alpha and foreground.

A hand is an ellipse (palm) plus five capsules (fingers) carrying a smooth
skin-colored shading field.  The sprite moves rigidly along a linear or
quadratic path during a box shutter sampled at ``N`` subframes::

    alpha(p) = (1/N) * sum_i m_i(p)
    F(p)     = sum_i m_i(p) * c_i(p) / sum_i m_i(p)

where ``m_i`` is the 4×4-supersampled coverage at subframe ``i`` and ``c_i``
the sprite color seen at pixel ``p`` at that subframe.  Uncovered pixels take
the foreground color of the nearest covered pixel.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import fileio
from .compositing import ImageBuffer, composite
from .errors import ConfigError, ContractViolation, RejectedSample

SUPERSAMPLE = 4
GUARD_BAND = 2.0
DEFAULT_SUBFRAMES = 32
SPLITS = ("train", "val", "test")
# disjoint seed ranges per split; supports up to 2**40 samples per split
SPLIT_SEED_OFFSETS = {"train": 0, "val": 1 << 40, "test": 2 << 40}
DEFAULT_COUNTS = {"train": 256, "val": 64, "test": 64}

# skin tones are interpolated between these anchors (then dimmed by up to 8%);
# capped so that tone * (1 + max shading) stays below 1
SKIN_LIGHT = (0.85, 0.70, 0.60)
SKIN_DARK = (0.36, 0.22, 0.15)
MAX_SHADING = 0.15

SAMPLE_FILES = ("image", "alpha", "fg", "bg")


@dataclass(frozen=True)
class Capsule:
    """Segment ``p0``–``p1`` thickened by ``radius`` (sprite-local coords)."""

    p0: tuple[float, float]
    p1: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class Sprite:
    """A hand-like shape in sprite-local coordinates centred on ``center``.

    ``center`` is in image coordinates (x right, y down, pixel (r, c) covers
    ``[c, c+1) x [r, r+1)``).
    """

    center: tuple[float, float]
    palm_radii: tuple[float, float]
    fingers: tuple[Capsule, ...] = ()
    tone: tuple[float, float, float] = (0.8, 0.6, 0.5)
    shading: float = 0.0
    shading_wave: tuple[float, float, float] = (0.0, 0.0, 0.0)  # kx, ky, phase

    def __post_init__(self):
        if min(self.palm_radii) <= 0:
            raise ContractViolation("palm radii must be positive")
        if not 0.0 <= self.shading <= MAX_SHADING:
            raise ContractViolation(f"shading must lie in [0, {MAX_SHADING}]")
        if min(self.tone) < 0 or max(self.tone) * (1.0 + self.shading) > 1.0:
            raise ContractViolation("sprite colors must stay within [0, 1]")

    def covers(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Binary coverage at sprite-local points."""
        rx, ry = self.palm_radii
        inside = (x / rx) ** 2 + (y / ry) ** 2 <= 1.0
        for cap in self.fingers:
            (x0, y0), (x1, y1) = cap.p0, cap.p1
            dx, dy = x1 - x0, y1 - y0
            t = np.clip(((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
            inside |= (x - x0 - t * dx) ** 2 + (y - y0 - t * dy) ** 2 <= cap.radius ** 2
        return inside

    def color(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        kx, ky, phase = self.shading_wave
        gain = 1.0 + self.shading * np.cos(kx * x + ky * y + phase)
        return gain[..., None] * np.asarray(self.tone)

    def bounding_radius(self) -> float:
        r = max(self.palm_radii)
        for cap in self.fingers:
            for px, py in (cap.p0, cap.p1):
                r = max(r, math.hypot(px, py) + cap.radius)
        return r


@dataclass(frozen=True)
class Pose:
    tx: float = 0.0
    ty: float = 0.0
    rotation: float = 0.0


@dataclass(frozen=True)
class Trajectory:
    """Rigid motion over the exposure; ``bend`` offsets the quadratic's midpoint."""

    kind: str = "linear"
    start: Pose = field(default_factory=Pose)
    end: Pose = field(default_factory=Pose)
    subframes: int = DEFAULT_SUBFRAMES
    bend: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic"):
            raise ContractViolation(f"trajectory kind must be linear or quadratic, got {self.kind!r}")
        if self.subframes < 1:
            raise ContractViolation("a trajectory needs at least one subframe")

    def poses(self) -> list[Pose]:
        """Poses at the subframe mid-times ``(i + 0.5) / N``."""
        s, e = self.start, self.end
        out = []
        for i in range(self.subframes):
            t = (i + 0.5) / self.subframes
            tx = (1 - t) * s.tx + t * e.tx
            ty = (1 - t) * s.ty + t * e.ty
            if self.kind == "quadratic":
                # Bezier with control point at the chord midpoint + bend
                w = 2.0 * t * (1 - t)
                tx += w * self.bend[0]
                ty += w * self.bend[1]
            out.append(Pose(tx, ty, (1 - t) * s.rotation + t * e.rotation))
        return out


@dataclass(frozen=True, eq=False)
class CompositeSample:
    image: ImageBuffer
    alpha: ImageBuffer
    foreground: ImageBuffer
    background: ImageBuffer
    seed: int
    meta: dict = field(default_factory=dict)


def sample_offsets(factor: int = SUPERSAMPLE) -> np.ndarray:
    """Sub-pixel sample positions within a unit pixel (stratified centres)."""
    return (np.arange(factor) + 0.5) / factor


def to_local(sprite: Sprite, pose: Pose, x: np.ndarray, y: np.ndarray):
    """Map image coordinates to sprite-local coordinates for ``pose``."""
    dx = x - sprite.center[0] - pose.tx
    dy = y - sprite.center[1] - pose.ty
    c, s = math.cos(pose.rotation), math.sin(pose.rotation)
    return c * dx + s * dy, -s * dx + c * dy


def check_guard_band(sprite: Sprite, traj: Trajectory, extent: tuple[int, int]) -> None:
    h, w = extent
    r = sprite.bounding_radius()
    for pose in traj.poses():
        cx, cy = sprite.center[0] + pose.tx, sprite.center[1] + pose.ty
        if (cx - r < GUARD_BAND or cy - r < GUARD_BAND
                or cx + r > w - GUARD_BAND or cy + r > h - GUARD_BAND):
            raise RejectedSample(
                f"sprite (radius {r:.2f}) at ({cx:.2f}, {cy:.2f}) leaves the guard band of a {h}x{w} image")


def render_blurred(sprite: Sprite, traj: Trajectory, extent: tuple[int, int]) -> tuple[ImageBuffer, ImageBuffer]:
    """Rasterize ``sprite`` along ``traj``; returns ``(alpha, foreground)``."""
    h, w = extent
    check_guard_band(sprite, traj, extent)
    offs = sample_offsets()
    ss = SUPERSAMPLE
    radius = sprite.bounding_radius()

    cover_sum = np.zeros((h, w))
    color_sum = np.zeros((h, w, 3))
    for pose in traj.poses():
        # only pixels inside the sprite's bounding box can be covered
        cx0, cy0 = sprite.center[0] + pose.tx, sprite.center[1] + pose.ty
        c0, c1 = max(0, math.floor(cx0 - radius)), min(w, math.ceil(cx0 + radius) + 1)
        r0, r1 = max(0, math.floor(cy0 - radius)), min(h, math.ceil(cy0 + radius) + 1)
        bh, bw = r1 - r0, c1 - c0
        xs = (np.arange(c0, c1)[:, None] + offs[None, :]).reshape(-1)
        ys = (np.arange(r0, r1)[:, None] + offs[None, :]).reshape(-1)
        lx, ly = to_local(sprite, pose, xs[None, :], ys[:, None])
        m = sprite.covers(lx, ly).reshape(bh, ss, bw, ss).mean(axis=(1, 3))
        px, py = to_local(sprite, pose, np.arange(c0, c1)[None, :] + 0.5, np.arange(r0, r1)[:, None] + 0.5)
        cover_sum[r0:r1, c0:c1] += m
        color_sum[r0:r1, c0:c1] += m[..., None] * sprite.color(px, py)

    covered = cover_sum > 0
    if not covered.any():
        raise RejectedSample("sprite covers no pixel")
    fg = np.zeros((h, w, 3))
    fg[covered] = color_sum[covered] / cover_sum[covered][:, None]
    if not covered.all():
        _, (ri, ci) = ndimage.distance_transform_edt(~covered, return_indices=True)
        fg = fg[ri, ci]
    alpha = np.minimum(cover_sum / traj.subframes, 1.0)
    return ImageBuffer(alpha), ImageBuffer(np.clip(fg, 0.0, 1.0))


# ---------------------------------------------------------------------------
# random sample generation


def _random_sprite(rng: np.random.Generator, scale: float) -> Sprite:
    rx = rng.uniform(6.5, 8.5) * scale
    ry = rng.uniform(7.5, 9.5) * scale
    fingers = []
    # four fingers fanned above the palm, thumb on one side
    for k, base_angle in enumerate((-0.45, -0.15, 0.15, 0.45)):
        ang = base_angle + rng.uniform(-0.08, 0.08)
        root = (math.sin(ang) * rx * 0.8, -math.cos(ang) * ry * 0.8)
        length = rng.uniform(6.0, 9.0) * scale * (0.85 if k in (0, 3) else 1.0)
        tip = (root[0] + math.sin(ang) * length, root[1] - math.cos(ang) * length)
        fingers.append(Capsule(root, tip, rng.uniform(1.5, 2.0) * scale))
    side = rng.choice((-1.0, 1.0))
    ang = side * rng.uniform(1.0, 1.4)
    root = (math.sin(ang) * rx * 0.7, -math.cos(ang) * ry * 0.7 + 2.0 * scale)
    length = rng.uniform(5.0, 7.0) * scale
    tip = (root[0] + math.sin(ang) * length, root[1] - math.cos(ang) * length)
    fingers.append(Capsule(root, tip, rng.uniform(1.8, 2.3) * scale))

    t = rng.uniform()
    dim = rng.uniform(0.92, 1.0)
    tone = tuple(float(dim * ((1 - t) * a + t * b)) for a, b in zip(SKIN_LIGHT, SKIN_DARK))
    wave_len = rng.uniform(12.0, 30.0) * scale
    theta = rng.uniform(0, 2 * math.pi)
    k = 2 * math.pi / wave_len
    return Sprite(
        center=(0.0, 0.0),
        palm_radii=(rx, ry),
        fingers=tuple(fingers),
        tone=tone,
        shading=float(rng.uniform(0.03, 0.12)),
        shading_wave=(k * math.cos(theta), k * math.sin(theta), float(rng.uniform(0, 2 * math.pi))),
    )


def _random_trajectory(rng: np.random.Generator, scale: float, subframes: int) -> Trajectory:
    kind = "quadratic" if rng.uniform() < 0.5 else "linear"
    length = rng.uniform(3.0, 16.0) * scale
    direction = rng.uniform(0, 2 * math.pi)
    rot0 = rng.uniform(-0.6, 0.6)
    spin = rng.uniform(-0.4, 0.4)
    half = (0.5 * length * math.cos(direction), 0.5 * length * math.sin(direction))
    bend = (0.0, 0.0)
    if kind == "quadratic":
        b = rng.uniform(-0.4, 0.4) * length
        bend = (-math.sin(direction) * b, math.cos(direction) * b)
    return Trajectory(kind, Pose(-half[0], -half[1], rot0), Pose(half[0], half[1], rot0 + spin),
                      subframes, bend)


def _place(sprite: Sprite, traj: Trajectory, extent, rng: np.random.Generator) -> Sprite:
    """Choose a centre so the whole path stays inside the guard band."""
    h, w = extent
    r = sprite.bounding_radius()
    poses = traj.poses()
    txs = [p.tx for p in poses]
    tys = [p.ty for p in poses]
    lo_x, hi_x = GUARD_BAND + r - min(txs), w - GUARD_BAND - r - max(txs)
    lo_y, hi_y = GUARD_BAND + r - min(tys), h - GUARD_BAND - r - max(tys)
    if lo_x > hi_x or lo_y > hi_y:
        raise RejectedSample("motion path does not fit inside the image")
    center = (float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y)))
    return Sprite(center, sprite.palm_radii, sprite.fingers, sprite.tone, sprite.shading, sprite.shading_wave)


def _shrink(traj: Trajectory, factor: float) -> Trajectory:
    s, e = traj.start, traj.end
    return Trajectory(traj.kind, Pose(s.tx * factor, s.ty * factor, s.rotation),
                      Pose(e.tx * factor, e.ty * factor, e.rotation), traj.subframes,
                      (traj.bend[0] * factor, traj.bend[1] * factor))


def procedural_background(rng: np.random.Generator, extent) -> np.ndarray:
    """Smooth color gradient plus stripes and a few flat rectangles."""
    h, w = extent
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    corners = rng.uniform(0.05, 0.95, size=(4, 3))
    bg = ((1 - yy)[..., None] * ((1 - xx)[..., None] * corners[0] + xx[..., None] * corners[1])
          + yy[..., None] * ((1 - xx)[..., None] * corners[2] + xx[..., None] * corners[3]))
    for _ in range(int(rng.integers(1, 4))):
        k = rng.uniform(2, 12) * 2 * math.pi
        th = rng.uniform(0, math.pi)
        amp = rng.uniform(0.03, 0.12, size=3)
        bg = bg + amp * np.sin(k * (math.cos(th) * xx + math.sin(th) * yy) + rng.uniform(0, 6.3))[..., None]
    for _ in range(int(rng.integers(0, 4))):
        r0, c0 = int(rng.integers(0, h)), int(rng.integers(0, w))
        r1, c1 = r0 + int(rng.integers(2, max(3, h // 3))), c0 + int(rng.integers(2, max(3, w // 3)))
        bg[r0:r1, c0:c1] = rng.uniform(0, 1, size=3)
    return np.clip(bg, 0.0, 1.0)


def _background_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"background directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise FileNotFoundError(f"no .png/.jpg backgrounds in {d}")
    return files


def directory_background(rng: np.random.Generator, extent, files: Sequence[Path]) -> np.ndarray:
    h, w = extent
    path = files[int(rng.integers(0, len(files)))]
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.width < w or img.height < h:
            s = max(w / img.width, h / img.height)
            img = img.resize((max(w, math.ceil(img.width * s)), max(h, math.ceil(img.height * s))),
                             Image.BILINEAR)
        x0 = int(rng.integers(0, img.width - w + 1))
        y0 = int(rng.integers(0, img.height - h + 1))
        arr = np.asarray(img.crop((x0, y0, x0 + w, y0 + h))).astype(np.float64) / 255.0
    return arr


def make_sample(seed: int, extent: tuple[int, int] = (64, 64), background_source: str = "procedural",
                background_dir=None, subframes: int = DEFAULT_SUBFRAMES) -> CompositeSample:
    """Draw one sample; every random choice comes from ``seed``."""
    if background_source not in ("procedural", "directory"):
        raise ConfigError(f"unknown background source {background_source!r}")
    files = _background_files(background_dir) if background_source == "directory" else None
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    h, w = extent
    scale = min(h, w) / 64.0
    sprite = _random_sprite(rng, scale)
    traj = _random_trajectory(rng, scale, subframes)
    for _ in range(8):
        try:
            sprite = _place(sprite, traj, extent, rng)
            break
        except RejectedSample:
            traj = _shrink(traj, 0.5)
    else:
        raise RejectedSample(f"seed {seed}: could not fit the sprite into a {h}x{w} image")
    alpha, fg = render_blurred(sprite, traj, extent)
    if files is None:
        bg = ImageBuffer(procedural_background(rng, extent))
    else:
        bg = ImageBuffer(directory_background(rng, extent, files))
    image = composite(fg, bg, alpha)
    meta = {"sprite": asdict(sprite), "trajectory": asdict(traj)}
    return CompositeSample(image, alpha, fg, bg, int(seed), meta)


# ---------------------------------------------------------------------------
# datasets on disk


def split_seeds(seed: int, count: int, split: str) -> list[int]:
    if split not in SPLIT_SEED_OFFSETS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    base = int(seed) + SPLIT_SEED_OFFSETS[split]
    return [(base + i) & 0xFFFFFFFFFFFFFFFF for i in range(count)]


def sample_dir(out_dir, split: str, index: int) -> Path:
    return Path(out_dir) / split / f"sample_{index:06d}"


def write_sample(directory, sample: CompositeSample, exact: bool = False) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    buffers = dict(zip(SAMPLE_FILES, (sample.image, sample.alpha, sample.foreground, sample.background)))
    for name, buf in buffers.items():
        fileio.write_image(directory / f"{name}.png", buf)
        if exact:
            fileio.write_tensor(directory / f"{name}.tsr", buf.data)


def read_sample(directory) -> dict[str, np.ndarray]:
    """Load one sample as HxWxC float64 arrays, preferring lossless ``.tsr`` files."""
    directory = Path(directory)
    out = {}
    for name in SAMPLE_FILES:
        tsr = directory / f"{name}.tsr"
        if tsr.exists():
            arr = fileio.read_tensor(tsr).astype(np.float64)
            out[name] = ImageBuffer(arr).data
        else:
            out[name] = fileio.read_image(directory / f"{name}.png").data
    if out["alpha"].shape[2] != 1 or out["image"].shape[2] != 3:
        raise ContractViolation(f"{directory}: alpha must be grayscale and image RGB")
    return out


def generate_dataset(seed: int, count: int, split: str, out_dir, extent: tuple[int, int] = (64, 64),
                     exact: bool = False, background_dir=None) -> dict[str, Any]:
    """Write ``count`` samples of ``split`` under ``out_dir`` and update its manifest."""
    if count < 1:
        raise ConfigError("count must be at least 1")
    validate_extent(extent)
    seeds = split_seeds(seed, count, split)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    manifest: dict[str, Any] = {"version": fileio.MANIFEST_VERSION, "extent": list(extent), "splits": []}
    if manifest_path.exists():
        manifest = fileio.read_manifest(manifest_path)
        if list(manifest["extent"]) != list(extent):
            raise ConfigError(f"{out_dir} already holds {manifest['extent']} samples, not {list(extent)}")
    source = "directory" if background_dir is not None else "procedural"
    for i, s in enumerate(seeds):
        sample = make_sample(s, extent, source, background_dir)
        write_sample(sample_dir(out_dir, split, i), sample, exact=exact)
    splits = [e for e in manifest["splits"] if e["name"] != split]
    splits.append({"name": split, "count": count, "seeds": seeds})
    manifest["splits"] = sorted(splits, key=lambda e: SPLITS.index(e["name"]))
    fileio.write_manifest(manifest_path, manifest)
    return manifest


def validate_extent(extent: tuple[int, int]) -> None:
    h, w = extent
    if h < 16 or w < 16 or h % 16 or w % 16:
        raise ConfigError(f"extent {h}x{w} must be a positive multiple of 16 in both dimensions")


def parse_extent(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"extent must look like HxW, got {text!r}") from None
    validate_extent((h, w))
    return h, w


def split_entry(manifest: dict, split: str) -> Optional[dict]:
    for entry in manifest["splits"]:
        if entry["name"] == split:
            return entry
    return None
