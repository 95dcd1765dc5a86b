"""Frames, clips, windows, LR generation and the synthetic motion generator."""

from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .functional import resize_matrix

log = logging.getLogger(__name__)

FRAME_PATTERN = "frame_{:08d}.{}"
FRAME_RE = re.compile(r"^frame_(\d{8})\.(png|ppm)$")
LARGE_MOTION_LR_PX = 8.0


# ----------------------------------------------------------------------
# image I/O
# ----------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return (arr[..., :3].astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def write_ppm(path, img: np.ndarray):
    arr = to_uint8(img)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary P6 PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return from_uint8(data.reshape(h, w, 3))


def write_png(path, img: np.ndarray):
    from PIL import Image

    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def read_frame(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".ppm"):
        return read_ppm(path)
    if path.endswith(".png"):
        return read_png(path)
    raise ValueError(f"unsupported frame format: {path}")


def write_frame(path, img):
    path = str(path)
    if path.endswith(".ppm"):
        write_ppm(path, img)
    elif path.endswith(".png"):
        write_png(path, img)
    else:
        raise ValueError(f"unsupported frame format: {path}")


# ----------------------------------------------------------------------
# clips and windows
# ----------------------------------------------------------------------

@dataclass
class VideoClip:
    frames: list
    clip_id: str = "clip"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise ValueError(f"clip {self.clip_id!r} has no frames")
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise ValueError(f"clip {self.clip_id!r}: frame {i} has shape {f.shape}, expected {shape}")

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames[0].shape


@dataclass
class FrameWindow:
    center: int
    offset: int
    frames: list
    padded: list

    def __post_init__(self):
        if len(self.frames) != 2 * self.offset + 1 or len(self.padded) != len(self.frames):
            raise ValueError("window must hold 2m+1 frames with one padding flag each")

    def array(self) -> np.ndarray:
        return np.stack(self.frames).astype(np.float32)

    @property
    def center_frame(self):
        return self.frames[self.offset]


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian over H and W, truncated at 3 sigma, clamp-to-edge."""
    if sigma <= 0:
        return img.copy()
    half = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-half, half + 1)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k /= k.sum()
    out = ndimage.correlate1d(img.astype(np.float64), k, axis=-1, mode="nearest")
    out = ndimage.correlate1d(out, k, axis=-2, mode="nearest")
    return out.astype(img.dtype)


def window_frames(clip: VideoClip, t: int, m: int = 2, radius_per_frame: float = 0.1) -> FrameWindow:
    """Frames t-m..t+m; slots beyond the clip hold the center frame blurred
    with sigma = radius_per_frame * d, d being the slot's distance to t."""
    n = len(clip)
    if not 0 <= t < n:
        raise IndexError(f"center {t} outside clip of {n} frames")
    frames, padded = [], []
    for j in range(t - m, t + m + 1):
        if 0 <= j < n:
            frames.append(clip.frames[j])
            padded.append(False)
        else:
            frames.append(gaussian_blur(clip.frames[t], radius_per_frame * abs(j - t)))
            padded.append(True)
    return FrameWindow(t, m, frames, padded)


# ----------------------------------------------------------------------
# LR generation
# ----------------------------------------------------------------------

def resize_image(img: np.ndarray, size, antialias: bool = True) -> np.ndarray:
    h, w = img.shape[-2:]
    mh = resize_matrix(h, size[0], antialias)
    mw = resize_matrix(w, size[1], antialias)
    return (mh @ img.astype(np.float64) @ mw.T).astype(np.float32)


def crop_to_multiple(img: np.ndarray, k: int) -> np.ndarray:
    h, w = img.shape[-2:]
    hh, ww = h - h % k, w - w % k
    top, left = (h - hh) // 2, (w - ww) // 2
    return img[..., top:top + hh, left:left + ww]


def make_lr(hr: VideoClip, scale: int = 4) -> VideoClip:
    """Bicubic (antialiased) downscale of every frame by ``scale``.

    Frames whose extents are not multiples of ``scale`` are center-cropped
    first; the cropped HR clip is stored in ``meta['hr_cropped']``.
    """
    h, w = hr.shape[-2:]
    frames = hr.frames
    if h % scale or w % scale:
        log.warning("clip %s: %dx%d not divisible by %d, center-cropping", hr.clip_id, h, w, scale)
        frames = [crop_to_multiple(f, scale) for f in frames]
        h, w = frames[0].shape[-2:]
    lr = [resize_image(f, (h // scale, w // scale)) for f in frames]
    meta = dict(hr.meta, scale=scale)
    if frames is not hr.frames:
        meta["hr_cropped"] = VideoClip(frames, hr.clip_id)
    return VideoClip(lr, hr.clip_id, meta)


def bicubic_upscale(img: np.ndarray, scale: int = 4) -> np.ndarray:
    h, w = img.shape[-2:]
    return resize_image(img, (h * scale, w * scale), antialias=False)


# ----------------------------------------------------------------------
# augmentation and cropping
# ----------------------------------------------------------------------

def _transform(img, flip, rot):
    if flip:
        img = img[..., ::-1]
    if rot:
        img = np.rot90(img, rot, axes=(-2, -1))
    return np.ascontiguousarray(img)


def augment(window: FrameWindow, gt: np.ndarray, rng, flip=None, rot=None):
    """Random horizontal flip and 90-degree rotation, applied identically to
    every window frame and to the ground truth."""
    flip = bool(rng.integers(2)) if flip is None else flip
    rot = int(rng.integers(2)) if rot is None else rot
    frames = [_transform(f, flip, rot) for f in window.frames]
    return FrameWindow(window.center, window.offset, frames, list(window.padded)), _transform(gt, flip, rot)


def crop_patches(window: FrameWindow, gt: np.ndarray, lr_size: int, rng, scale: int = 4, origin=None):
    h, w = window.frames[0].shape[-2:]
    if h < lr_size or w < lr_size:
        raise ValueError(f"LR frames {h}x{w} are smaller than the {lr_size} patch")
    if gt.shape[-2:] != (h * scale, w * scale):
        raise ValueError(f"GT {gt.shape[-2:]} does not match LR {h}x{w} at scale {scale}")
    if origin is None:
        y, x = int(rng.integers(h - lr_size + 1)), int(rng.integers(w - lr_size + 1))
    else:
        y, x = origin
    frames = [f[..., y:y + lr_size, x:x + lr_size].copy() for f in window.frames]
    g = gt[..., scale * y:scale * (y + lr_size), scale * x:scale * (x + lr_size)].copy()
    return FrameWindow(window.center, window.offset, frames, list(window.padded)), g


# ----------------------------------------------------------------------
# synthetic video
# ----------------------------------------------------------------------

PATTERNS = ("translate", "rotate-translate", "sprite-field")


@dataclass
class MotionSpec:
    """``displacement`` is in pixels per frame of the generated (HR) frames."""

    displacement: float = 0.0
    pattern: str = "translate"
    seed: int = 0
    angle: float = 0.0
    rotation: float = 2.0

    def __post_init__(self):
        if self.displacement < 0:
            raise ValueError("displacement must be >= 0")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown motion pattern {self.pattern!r}; expected one of {PATTERNS}")

    def is_large(self, scale: int = 4) -> bool:
        return self.displacement / scale >= LARGE_MOTION_LR_PX


def _band_limited(rng, shape, sigma):
    noise = rng.standard_normal(shape)
    noise = ndimage.gaussian_filter(noise, sigma, mode="wrap")
    noise -= noise.min()
    return noise / max(noise.max(), 1e-12)


def _sprites(rng, canvas, count):
    canvas = canvas.copy()
    _, h, w = canvas.shape
    for _ in range(count):
        color = rng.uniform(0.0, 1.0, 3)[:, None, None]
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        size = rng.uniform(4, 18)
        kind = rng.integers(3)
        ext = int(3 * size) + 2
        y0, y1 = max(0, int(cy) - ext), min(h, int(cy) + ext + 1)
        x0, x1 = max(0, int(cx) - ext), min(w, int(cx) + ext + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        if kind == 0:
            mask = (np.abs(yy - cy) < size) & (np.abs(xx - cx) < size * rng.uniform(0.3, 1.5))
        elif kind == 1:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < size ** 2
        else:
            theta = rng.uniform(0, np.pi)
            dist = np.abs((yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta))
            mask = (dist < rng.uniform(0.8, 2.5)) & ((yy - cy) ** 2 + (xx - cx) ** 2 < (3 * size) ** 2)
        patch = canvas[:, y0:y1, x0:x1]
        canvas[:, y0:y1, x0:x1] = np.where(mask[None], color, patch)
    return canvas


def make_texture(rng, h, w, sprite_density=1.0 / 900):
    """Band-limited color noise with sharp-edged sprites on top."""
    base = np.stack([_band_limited(rng, (h, w), rng.uniform(3, 8)) for _ in range(3)])
    base = 0.15 + 0.7 * base
    return _sprites(rng, base, max(1, int(h * w * sprite_density)))


def synth_video(spec: MotionSpec, n_frames: int, size, clip_id: str = "synth") -> VideoClip:
    """Procedural HR clip moving by ``spec.displacement`` px per frame.

    For the translate pattern frame k is frame 0 shifted by k*displacement
    pixels along ``spec.angle`` (rounded to whole pixels).
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    h, w = (size, size) if isinstance(size, int) else tuple(size)
    if h < 1 or w < 1:
        raise ValueError("frame size must be positive")
    rng = np.random.default_rng(spec.seed)
    d = spec.displacement
    dy, dx = math.sin(math.radians(spec.angle)), math.cos(math.radians(spec.angle))
    span = int(math.ceil(d * (n_frames - 1))) + 1
    margin = span + 8
    frames, motion = [], []

    if spec.pattern == "translate":
        canvas = make_texture(rng, h + margin * 2, w + margin * 2)
        for k in range(n_frames):
            oy = margin + int(round(k * d * dy))
            ox = margin + int(round(k * d * dx))
            frames.append(canvas[:, oy:oy + h, ox:ox + w].astype(np.float32).copy())
            motion.append((oy - margin, ox - margin))
    elif spec.pattern == "rotate-translate":
        pad = int(math.ceil(0.5 * math.hypot(h, w))) + 4
        canvas = make_texture(rng, h + 2 * (margin + pad), w + 2 * (margin + pad))
        ch, cw = canvas.shape[1:]
        for k in range(n_frames):
            ang = math.radians(k * spec.rotation)
            cy = ch / 2 + k * d * dy
            cx = cw / 2 + k * d * dx
            rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
            out_c = np.array([(h - 1) / 2, (w - 1) / 2])
            offset = np.array([cy, cx]) - rot @ out_c
            frame = np.stack([ndimage.affine_transform(canvas[c], rot, offset=offset, output_shape=(h, w),
                                                       order=3, mode="nearest") for c in range(3)])
            frames.append(np.clip(frame, 0, 1).astype(np.float32))
            motion.append((k * d * dy, k * d * dx, k * spec.rotation))
    else:
        background = make_texture(rng, h, w, sprite_density=1.0 / 4000)
        count = max(2, h * w // 1200)
        sprites = []
        for _ in range(count):
            r = rng.uniform(5, 14)
            theta = rng.uniform(0, 2 * np.pi)
            sprites.append((rng.uniform(0, h), rng.uniform(0, w), r, rng.uniform(0, 1, 3),
                            d * math.sin(theta), d * math.cos(theta)))
        yy, xx = np.mgrid[0:h, 0:w]
        for k in range(n_frames):
            frame = background.copy()
            for cy, cx, r, color, vy, vx in sprites:
                py, px = (cy + k * vy) % h, (cx + k * vx) % w
                mask = (yy - py) ** 2 + (xx - px) ** 2 < r * r
                frame = np.where(mask[None], color[:, None, None], frame)
            frames.append(frame.astype(np.float32))
        motion = [(s[4], s[5]) for s in sprites]
    meta = {"seed": spec.seed, "displacement": d, "pattern": spec.pattern, "motion": motion}
    return VideoClip(frames, clip_id, meta)


def smooth_gradient_clip(n_frames: int = 3, size: int = 64, clip_id: str = "gradient") -> VideoClip:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    base = np.stack([0.2 + 0.6 * xx, 0.2 + 0.6 * yy, 0.5 + 0.3 * (xx - yy) / 2]).astype(np.float32)
    return VideoClip([base.copy() for _ in range(n_frames)], clip_id)


# ----------------------------------------------------------------------
# directory layout and manifests
# ----------------------------------------------------------------------

def write_clip(clip: VideoClip, directory, fmt: str = "ppm"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(clip.frames):
        write_frame(directory / FRAME_PATTERN.format(i, fmt), f)


def list_frames(directory) -> list:
    directory = Path(directory)
    found = {}
    for name in sorted(os.listdir(directory)):
        m = FRAME_RE.match(name)
        if m:
            found.setdefault(int(m.group(1)), directory / name)
    return [found[k] for k in sorted(found)]


def read_clip(directory, clip_id=None) -> VideoClip:
    directory = Path(directory)
    paths = list_frames(directory)
    if not paths:
        raise FileNotFoundError(f"no frame_XXXXXXXX.(png|ppm) files in {directory}")
    return VideoClip([read_frame(p) for p in paths], clip_id or directory.name)


def read_clips(root) -> list:
    root = Path(root)
    return [read_clip(root / d) for d in sorted(os.listdir(root)) if (root / d).is_dir()]


def write_manifest(path, entries: dict):
    with open(path, "w") as fh:
        for k, v in entries.items():
            fh.write(f"{k} = {v}\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


# ----------------------------------------------------------------------
# training samples
# ----------------------------------------------------------------------

class ClipDataset:
    """Pairs of (LR window, HR center frame) drawn from HR clips.

    Sampling is a pure function of (seed, iteration), so resumed and
    uninterrupted runs see identical batches.
    """

    def __init__(self, hr_clips, scale: int = 4, m: int = 2, lr_clips=None):
        self.scale, self.m = scale, m
        if lr_clips is None:
            lr_clips = [make_lr(c, scale) for c in hr_clips]
            hr_clips = [c.meta.get("hr_cropped", h) for c, h in zip(lr_clips, hr_clips)]
        self.hr, self.lr = list(hr_clips), list(lr_clips)
        if not self.hr:
            raise ValueError("dataset has no clips")

    def __len__(self):
        return sum(len(c) for c in self.hr)

    def window(self, ci: int, t: int):
        return window_frames(self.lr[ci], t, self.m), self.hr[ci].frames[t]

    def sample(self, rng, lr_size: int, do_augment: bool = True):
        ci = int(rng.integers(len(self.hr)))
        t = int(rng.integers(len(self.hr[ci])))
        win, gt = self.window(ci, t)
        win, gt = crop_patches(win, gt, lr_size, rng, self.scale)
        if do_augment:
            win, gt = augment(win, gt, rng)
        return win.array(), gt

    def batch(self, seed: int, iteration: int, batch_size: int, lr_size: int, do_augment: bool = True):
        rng = np.random.default_rng([seed, iteration])
        items = [self.sample(rng, lr_size, do_augment) for _ in range(batch_size)]
        return (np.stack([w for w, _ in items]).astype(np.float32),
                np.stack([g for _, g in items]).astype(np.float32))
