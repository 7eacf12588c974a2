"""Synthetic "instrument" videos with controllable domain shift.

Each video shows 2-3 capsule-shaped tools pivoting about entry points
outside the frame, over a value-noise tissue background. Frames are stored
as binary PPM and masks as binary PGM, so the on-disk layout is readable by
ordinary image tools and round-trips exactly.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigurationError, LoadError

Color = tuple[float, float, float]
Range = tuple[float, float]


@dataclass(frozen=True)
class DomainSpec:
    name: str = "srcA"
    height: int = 64
    width: int = 64
    length: int = 40
    # background
    bg_color: Color = (0.62, 0.26, 0.22)
    bg_noise_amp: float = 0.18
    bg_noise_scale: float = 12.0
    bg_tint: Color = (0.10, 0.04, 0.02)
    # instruments
    tool_count: tuple[int, int] = (2, 3)
    tool_length: Range = (40.0, 70.0)
    tool_width: Range = (5.0, 8.0)
    tip_shape: float = 1.35
    tool_albedo: Color = (0.56, 0.56, 0.60)
    specular: float = 0.30
    # per-video uniform perturbation of both palettes, per channel
    palette_jitter: float = 0.0
    # motion
    speed: Range = (0.5, 1.5)
    direction_jitter: float = 0.15
    burst_prob: float = 0.0
    burst_magnitude: float = 0.0
    # photometry: per-frame brightness change, drawn per video from this range
    illumination_drift: Range = (0.0, 0.0)
    sensor_noise: float = 0.01

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ConfigurationError("frames must be at least 16x16")
        if self.length < 2:
            raise ConfigurationError("videos need at least two frames")
        for nm in ("tool_count", "tool_length", "tool_width", "speed", "illumination_drift"):
            lo, hi = getattr(self, nm)
            if hi < lo:
                raise ConfigurationError(f"{nm}: range ({lo}, {hi}) is inverted")
        if self.tool_count[0] < 1:
            raise ConfigurationError("at least one instrument per video")
        if self.tool_width[0] < 2.0:
            raise ConfigurationError("tool width must be >= 2 px")
        if self.speed[0] < 0 or self.burst_magnitude < 0:
            raise ConfigurationError("speeds must be non-negative")
        if self.palette_jitter < 0:
            raise ConfigurationError("palette_jitter must be non-negative")
        if not 0.0 <= self.burst_prob <= 1.0:
            raise ConfigurationError("burst_prob must be a probability")
        for c in (self.bg_color, self.tool_albedo, self.bg_tint):
            if len(c) != 3:
                raise ConfigurationError("colors are RGB triples")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DomainSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown DomainSpec keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        spec = cls(**kw)
        spec.validate()
        return spec

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


REFERENCE_SPECS: dict[str, DomainSpec] = {
    "srcA": DomainSpec(palette_jitter=0.45, illumination_drift=(-0.012, 0.012)),
    "tgtB": DomainSpec(
        name="tgtB",
        bg_color=(0.50, 0.20, 0.30),
        bg_tint=(0.06, 0.02, 0.08),
        tool_albedo=(0.36, 0.44, 0.56),
        specular=0.45,
        speed=(1.5, 3.0),
        direction_jitter=0.25,
        burst_prob=0.08,
        burst_magnitude=14.0,
        illumination_drift=(-0.012, -0.006),
    ),
    "tgtC": DomainSpec(
        name="tgtC",
        bg_color=(0.70, 0.45, 0.30),
        bg_noise_amp=0.24,
        bg_tint=(0.08, 0.06, 0.0),
        tool_width=(4.0, 7.0),
        tool_albedo=(0.62, 0.58, 0.46),
        specular=0.20,
        speed=(1.0, 2.5),
        direction_jitter=0.30,
        burst_prob=0.10,
        burst_magnitude=12.0,
        illumination_drift=(0.004, 0.010),
    ),
}

# palette the shift dial moves toward
_SHIFT_BG: Color = (0.35, 0.30, 0.45)
_SHIFT_TOOL: Color = (0.30, 0.40, 0.60)


def shift_palette(spec: DomainSpec, amount: float, name: str | None = None) -> DomainSpec:
    """Blend background and tool colors toward a fixed off-domain palette."""
    def mix(a: Color, b: Color) -> Color:
        return tuple(float((1 - amount) * x + amount * y) for x, y in zip(a, b))  # type: ignore[return-value]

    return dataclasses.replace(
        spec,
        name=name or f"{spec.name}-shift{amount:g}",
        bg_color=mix(spec.bg_color, _SHIFT_BG),
        tool_albedo=mix(spec.tool_albedo, _SHIFT_TOOL),
    )


@dataclass
class Video:
    frames: np.ndarray  # (T, H, W, 3) float64 in [0, 1]
    masks: np.ndarray  # (T, H, W) uint8 in {0, 1}; targets may carry only the first, (1, H, W)
    meta: dict[str, Any] = field(default_factory=dict)
    role: str = "source"

    def __post_init__(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise LoadError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.masks.ndim != 3 or self.masks.shape[0] not in (1, self.frames.shape[0]) \
                or self.masks.shape[1:] != self.frames.shape[1:3]:
            raise LoadError(f"masks {self.masks.shape} do not match frames {self.frames.shape}")

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])

    @property
    def fully_labeled(self) -> bool:
        return self.masks.shape[0] == self.frames.shape[0]

    @property
    def first_mask(self) -> np.ndarray:
        return self.masks[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Video):
            return NotImplemented
        return (np.array_equal(self.frames, other.frames)
                and np.array_equal(self.masks, other.masks))


# --- rendering ----------------------------------------------------------------

def value_noise(h: int, w: int, cell: float, rng: np.random.Generator) -> np.ndarray:
    """Bilinearly interpolated random lattice, values in [0, 1]."""
    gh, gw = int(np.ceil(h / cell)) + 2, int(np.ceil(w / cell)) + 2
    lattice = rng.random((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    a = lattice[y0][:, x0]
    b = lattice[y0][:, x0 + 1]
    c = lattice[y0 + 1][:, x0]
    d = lattice[y0 + 1][:, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def _segment_distance(py, px, ay, ax, by, bx):
    dy, dx = by - ay, bx - ax
    L2 = dy * dy + dx * dx
    t = np.clip(((py - ay) * dy + (px - ax) * dx) / L2, 0.0, 1.0)
    qy, qx = ay + t * dy, ax + t * dx
    return np.hypot(py - qy, px - qx), t


@dataclass
class _Tool:
    tip: np.ndarray  # (y, x)
    heading: float
    speed: float
    pivot: np.ndarray
    length: float
    radius: float
    spec_pos: float


def _spawn_tools(spec: DomainSpec, rng: np.random.Generator) -> list[_Tool]:
    h, w = spec.height, spec.width
    n = int(rng.integers(spec.tool_count[0], spec.tool_count[1] + 1))
    tools = []
    for _ in range(n):
        radius = rng.uniform(*spec.tool_width) / 2.0
        m = radius * spec.tip_shape + 1.0
        tip = np.array([rng.uniform(m, h - 1 - m), rng.uniform(m, w - 1 - m)])
        side = int(rng.integers(4))
        along = rng.uniform(0.1, 0.9)
        off = 0.25 * max(h, w)
        pivot = {
            0: np.array([-off, along * w]),
            1: np.array([h + off, along * w]),
            2: np.array([along * h, -off]),
            3: np.array([along * h, w + off]),
        }[side]
        tools.append(_Tool(
            tip=tip,
            heading=rng.uniform(0, 2 * np.pi),
            speed=rng.uniform(*spec.speed),
            pivot=pivot,
            length=rng.uniform(*spec.tool_length),
            radius=radius,
            spec_pos=rng.uniform(0.2, 0.6),
        ))
    return tools


def _reflect(tool: _Tool, h: int, w: int, margin: float) -> None:
    lo = np.array([margin, margin])
    hi = np.array([h - 1 - margin, w - 1 - margin])
    vy, vx = np.sin(tool.heading), np.cos(tool.heading)
    for ax in range(2):
        for _ in range(4):
            if tool.tip[ax] < lo[ax]:
                tool.tip[ax] = 2 * lo[ax] - tool.tip[ax]
            elif tool.tip[ax] > hi[ax]:
                tool.tip[ax] = 2 * hi[ax] - tool.tip[ax]
            else:
                break
            if ax == 0:
                vy = -vy
            else:
                vx = -vx
        tool.tip[ax] = np.clip(tool.tip[ax], lo[ax], hi[ax])
    tool.heading = float(np.arctan2(vy, vx))


def _move(tool: _Tool, spec: DomainSpec, rng: np.random.Generator) -> None:
    tool.heading += rng.normal(0.0, spec.direction_jitter)
    step = tool.speed * np.array([np.sin(tool.heading), np.cos(tool.heading)])
    tool.tip = tool.tip + step
    if spec.burst_prob > 0 and rng.random() < spec.burst_prob:
        ang = rng.uniform(0, 2 * np.pi)
        tool.tip = tool.tip + spec.burst_magnitude * np.array([np.sin(ang), np.cos(ang)])
    _reflect(tool, spec.height, spec.width, tool.radius * spec.tip_shape + 1.0)


def _draw(spec: DomainSpec, background: np.ndarray, albedo: np.ndarray, drift: float,
          tools: list[_Tool], t: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.height, spec.width
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    img = background.copy()
    mask = np.zeros((h, w), dtype=bool)
    for tool in tools:
        u = tool.pivot - tool.tip
        u = u / np.linalg.norm(u)
        end = tool.tip + tool.length * u
        d, s = _segment_distance(py, px, tool.tip[0], tool.tip[1], end[0], end[1])
        shaft = d <= tool.radius
        jaw_r = tool.radius * spec.tip_shape
        dj = np.hypot(py - tool.tip[0], px - tool.tip[1])
        jaw = dj <= jaw_r
        inside = shaft | jaw
        # cylinder shading across the shaft, flat-ish jaw
        rel = np.where(shaft, d / tool.radius, np.minimum(dj / jaw_r, 1.0))
        shade = 0.55 + 0.45 * np.sqrt(np.clip(1.0 - rel ** 2, 0.0, 1.0))
        along = (s - tool.spec_pos) * tool.length
        blob = spec.specular * np.exp(-(d ** 2 + along ** 2) / (0.6 * tool.radius) ** 2)
        col = albedo[None, None, :] * shade[..., None] + blob[..., None]
        img = np.where(inside[..., None], col, img)
        mask |= inside
    img = img * (1.0 + drift * t)
    if spec.sensor_noise > 0:
        img = img + rng.normal(0.0, spec.sensor_noise, img.shape)
    frame = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return frame, mask.astype(np.uint8)


def render_sequence(spec: DomainSpec, seed: int) -> Video:
    """Fully deterministic video for ``(spec, seed)``."""
    spec.validate()
    root = np.random.SeedSequence(seed)
    bg_rng, tool_rng, noise_rng, photo_rng = (np.random.default_rng(s) for s in root.spawn(4))
    h, w = spec.height, spec.width
    jit = spec.palette_jitter
    base = np.clip(np.asarray(spec.bg_color) + photo_rng.uniform(-jit, jit, 3), 0.0, 1.0)
    albedo = np.clip(np.asarray(spec.tool_albedo) + photo_rng.uniform(-jit, jit, 3), 0.0, 1.0)
    drift = float(photo_rng.uniform(*spec.illumination_drift))
    n1 = value_noise(h, w, spec.bg_noise_scale, bg_rng)
    n2 = value_noise(h, w, spec.bg_noise_scale / 2.0, bg_rng)
    tint = np.asarray(spec.bg_tint)
    background = (base[None, None, :] * (1.0 + spec.bg_noise_amp * 2.0 * (n1[..., None] - 0.5))
                  + tint[None, None, :] * 2.0 * (n2[..., None] - 0.5))
    tools = _spawn_tools(spec, tool_rng)
    frames, masks = [], []
    for t in range(spec.length):
        if t > 0:
            for tool in tools:
                _move(tool, spec, tool_rng)
        f, m = _draw(spec, background, albedo, drift, tools, t, noise_rng)
        frames.append(f)
        masks.append(m)
    meta = {"T": spec.length, "H": h, "W": w, "seed": int(seed),
            "spec": spec.name, "spec_hash": spec.digest()}
    return Video(np.stack(frames), np.stack(masks), meta)


# --- augmentation --------------------------------------------------------------

def rotate_pair(frame: np.ndarray, mask: np.ndarray, degrees: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate about the image center; bilinear for the frame, nearest for the mask."""
    h, w = mask.shape
    th = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source location
    sy = cy + (yy - cy) * np.cos(th) - (xx - cx) * np.sin(th)
    sx = cx + (yy - cy) * np.sin(th) + (xx - cx) * np.cos(th)
    ny = np.clip(np.rint(sy), 0, h - 1).astype(int)
    nx = np.clip(np.rint(sx), 0, w - 1).astype(int)
    out_mask = mask[ny, nx]
    sy, sx = np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (sy - y0)[..., None], (sx - x0)[..., None]
    out = (frame[y0, x0] * (1 - fy) * (1 - fx) + frame[y0, x1] * (1 - fy) * fx
           + frame[y1, x0] * fy * (1 - fx) + frame[y1, x1] * fy * fx)
    return out, out_mask


AUG_FLAGS = ("hflip", "rotate", "brightness")


def augment_pair(frame: np.ndarray, mask: np.ndarray, flags, rng: np.random.Generator,
                 p: float = 0.5, max_degrees: float = 10.0,
                 max_brightness: float = 0.10) -> tuple[np.ndarray, np.ndarray]:
    flags = set(flags)
    bad = flags - set(AUG_FLAGS)
    if bad:
        raise ConfigurationError(f"unknown augmentation flags {sorted(bad)}")
    f, m = frame, mask
    if "hflip" in flags and rng.random() < p:
        f, m = f[:, ::-1], m[:, ::-1]
    if "rotate" in flags and rng.random() < p:
        f, m = rotate_pair(f, m, rng.uniform(-max_degrees, max_degrees))
    if "brightness" in flags and rng.random() < p:
        f = np.clip(f * (1.0 + rng.uniform(-max_brightness, max_brightness)), 0.0, 1.0)
    return np.ascontiguousarray(f), np.ascontiguousarray(m)


# --- PPM / PGM codec -------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _read_netpbm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise LoadError(f"{path}: {e}") from e
    pos, vals = 0, []
    for _ in range(4):
        mt = _TOKEN.match(raw, pos)
        if mt is None:
            raise LoadError(f"{path}: truncated header")
        vals.append(mt.group(1))
        pos = mt.end()
    if vals[0] != magic:
        raise LoadError(f"{path}: expected {magic.decode()} file, found {vals[0][:2]!r}")
    try:
        w, h, maxval = int(vals[1]), int(vals[2]), int(vals[3])
    except ValueError as e:
        raise LoadError(f"{path}: malformed header") from e
    if not 0 < maxval < 256:
        raise LoadError(f"{path}: only 8-bit maxval is supported (got {maxval})")
    pos += 1  # single whitespace after maxval
    n = w * h * channels
    body = raw[pos:pos + n]
    if len(body) != n:
        raise LoadError(f"{path}: expected {n} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    arr = arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)
    if maxval != 255:
        arr = np.round(arr.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return arr


def write_ppm(path: Path, frame: np.ndarray) -> None:
    data = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = data.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def write_pgm(path: Path, mask: np.ndarray) -> None:
    data = (np.asarray(mask) > 0).astype(np.uint8) * 255
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    return _read_netpbm(Path(path), b"P6", 3).astype(np.float64) / 255.0


def read_pgm(path: Path) -> np.ndarray:
    return (_read_netpbm(Path(path), b"P5", 1) >= 128).astype(np.uint8)


# --- dataset layout ---------------------------------------------------------------

def save_video(video: Video, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t in range(video.length):
        write_ppm(directory / f"frame_{t + 1:06d}.ppm", video.frames[t])
        if t < video.masks.shape[0]:
            write_pgm(directory / f"mask_{t + 1:06d}.pgm", video.masks[t])
    h, w = video.masks.shape[1:]
    meta = {"T": video.length, "H": int(h), "W": int(w)}
    meta.update({k: v for k, v in video.meta.items() if k not in meta})
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def generate_dataset(spec: DomainSpec, seed: int, num_videos: int, root: Path) -> Path:
    """Write ``<root>/<spec.name>/`` with a manifest and ``num_videos`` videos."""
    out = Path(root) / spec.name
    try:
        out.mkdir(parents=True, exist_ok=True)
        names = []
        for k in range(num_videos):
            name = f"video_{k:04d}"
            save_video(render_sequence(spec, seed + k), out / name)
            names.append(name)
        manifest = {"domain": spec.name, "spec": spec.to_dict(), "seed": int(seed), "videos": names}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise LoadError(f"writing dataset under {out}: {e}") from e
    return out


def load_video(path: Path, role: str = "source") -> Video:
    path = Path(path)
    if role not in ("source", "target"):
        raise ConfigurationError(f"role must be 'source' or 'target', got {role!r}")
    if not path.is_dir():
        raise LoadError(f"{path}: not a video directory")
    frame_files = sorted(path.glob("frame_*.ppm"))
    if not frame_files:
        raise LoadError(f"{path}: no frame_*.ppm files")
    meta: dict[str, Any] = {}
    meta_path = path / "meta.json"
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as e:
            raise LoadError(f"{meta_path}: {e}") from e
    T = int(meta.get("T", len(frame_files)))
    frames, masks = [], []
    # files are numbered from 1; targets only need the first mask, but if
    # any later mask exists they must all exist (they are then used for scoring)
    later = any((path / f"mask_{t:06d}.pgm").exists() for t in range(2, T + 1))
    need_all = role == "source" or later
    for t in range(1, T + 1):
        fp, mp = path / f"frame_{t:06d}.ppm", path / f"mask_{t:06d}.pgm"
        if not fp.exists():
            raise LoadError(f"{path}: missing {fp.name}")
        frames.append(read_ppm(fp))
        if t == 1 or need_all:
            if not mp.exists():
                raise LoadError(f"{path}: missing {mp.name}")
            masks.append(read_pgm(mp))
    if len(frame_files) != T:
        raise LoadError(f"{path}: meta declares T={T} but {len(frame_files)} frames are present")
    if len({f.shape for f in frames}) != 1 or {m.shape for m in masks} != {frames[0].shape[:2]}:
        raise LoadError(f"{path}: inconsistent frame/mask shapes")
    h, w = frames[0].shape[:2]
    if ("H" in meta and int(meta["H"]) != h) or ("W" in meta and int(meta["W"]) != w):
        raise LoadError(f"{path}: meta size {meta.get('H')}x{meta.get('W')} != {h}x{w}")
    meta.setdefault("T", T)
    meta.setdefault("H", h)
    meta.setdefault("W", w)
    meta["path"] = str(path)
    return Video(np.stack(frames), np.stack(masks), meta, role)


def load_domain(directory: Path, role: str = "source") -> list[Video]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if manifest_path.exists():
        try:
            names = json.loads(manifest_path.read_text())["videos"]
        except (json.JSONDecodeError, KeyError) as e:
            raise LoadError(f"{manifest_path}: {e}") from e
    else:
        names = sorted(p.name for p in directory.glob("video_*") if p.is_dir())
    return [load_video(directory / n, role) for n in names]
