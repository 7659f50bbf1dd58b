"""Synthetic videos and chunked keyframe-then-propagate completion."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np

from .. import archive
from ..flow import FlowField, fb_consistency, pixel_grid, warp
from ..model import Checkpoint, model_forward
from ..synthdata import _apply_affine, gen_mask, gen_scene, invert_affine, sub_seed
from ..tensor import no_grad

DEFAULT_CHUNK = 20
DEFAULT_OFFSETS = (10, 20, 40)
PREALIGN_FB = 0.5  # px; context pixels more consistent than this are copied
PROPAGATE_FB = 1.0  # px; warped keyframe pixels beyond this are not trusted
FB_CLIP = 10.0  # consistency values handed to the model are clipped here
OUT_OF_VIEW = 1e3


class VideoError(ValueError):
    pass


@dataclass
class Video:
    """Frames ``F×H×W×3``, hole masks ``F×H×W×1`` and per-frame affine maps
    ``F×2×3`` taking frame pixels to scene coordinates."""

    frames: np.ndarray
    masks: np.ndarray
    affines: np.ndarray

    def __post_init__(self):
        f = self.frames.shape[0]
        if self.masks.shape != self.frames.shape[:3] + (1,) or self.affines.shape != (f, 2, 3):
            raise VideoError(
                f"inconsistent video arrays: frames {self.frames.shape}, masks {self.masks.shape}, "
                f"affines {self.affines.shape}"
            )

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple:
        return self.frames.shape[1:3]

    def masked(self, t: int) -> np.ndarray:
        """Model input ``H×W×4`` of frame ``t``."""
        m = self.masks[t]
        return np.concatenate([self.frames[t] * (1.0 - m), m], axis=-1)

    def flow(self, t: int, u: int) -> FlowField:
        """Analytic offsets taking pixels of frame ``t`` to frame ``u``."""
        h, w = self.size
        grid = pixel_grid(h, w)
        a = _compose(invert_affine(self.affines[u]), self.affines[t])
        return FlowField(_apply_affine(a, grid) - grid)

    def consistency(self, t: int, u: int) -> np.ndarray:
        """fb-consistency of the ``t -> u`` flow; destinations outside frame
        ``u`` count as inconsistent."""
        fwd = self.flow(t, u)
        fb = fb_consistency(fwd, self.flow(u, t)).data
        h, w = self.size
        pos = fwd.positions()
        outside = (pos[..., 0] < 0) | (pos[..., 0] > w - 1) | (pos[..., 1] < 0) | (pos[..., 1] > h - 1)
        fb[outside] = OUT_OF_VIEW
        return fb

    def to_entries(self) -> dict:
        return {"frames": self.frames, "masks": self.masks, "affines": self.affines}


def _compose(a, b) -> np.ndarray:
    """Affine ``a ∘ b`` (apply ``b`` first)."""
    lin = a[:, :2] @ b[:, :2]
    return np.concatenate([lin, (a[:, :2] @ b[:, 2:]) + a[:, 2:]], axis=1)


def video_affines(seed: int, num: int, h: int, w: int, static: bool = False) -> np.ndarray:
    """Smooth camera path: rotation, zoom and translation growing linearly in time."""
    out = np.zeros((num, 2, 3))
    if static:
        out[:, 0, 0] = out[:, 1, 1] = 1.0
        return out
    from ..synthdata import rng_for

    rng = rng_for(seed, "video", "motion")
    rot = (2 * rng.random() - 1) * 0.004  # tan of the half angle per frame
    zoom = (2 * rng.random() - 1) * 0.002
    vel = (2 * rng.random(2) - 1) * 0.4  # px per frame
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    for t in range(num):
        k = rot * t
        cos, sin = (1 - k * k) / (1 + k * k), 2 * k / (1 + k * k)
        s = 1.0 + zoom * t
        lin = s * np.array([[cos, -sin], [sin, cos]])
        centre = np.array([cx, cy])
        shift = centre - lin @ centre + vel * t
        out[t] = np.concatenate([lin, shift[:, None]], axis=1)
    return out


def make_video(seed: int, num: int = 60, size: int = 64, static: bool = False) -> Video:
    """Scene ``seed`` seen along a smooth path, each frame with its own mask."""
    if num < 1 or size < 1:
        raise VideoError("video needs at least one frame and positive extents")
    scene = gen_scene(sub_seed(seed, "video", "scene"), size, size)
    affines = video_affines(seed, num, size, size, static)
    grid = pixel_grid(size, size)
    frames = np.stack([scene.render_grid(_apply_affine(a, grid)) for a in affines])
    masks = np.stack([gen_mask(sub_seed(seed, "video", "mask", t), size, size) for t in range(num)])
    return Video(frames, masks, affines)


VIDEO_FILE = "video.kpt"


def save_video(video: Video, directory):
    os.makedirs(directory, exist_ok=True)
    archive.save(os.path.join(directory, VIDEO_FILE), video.to_entries())


def load_video(path) -> Video:
    if os.path.isdir(path):
        path = os.path.join(path, VIDEO_FILE)
    try:
        e = archive.load(path)
    except (OSError, archive.ArchiveError) as err:
        raise VideoError(f"cannot read video {path}: {err}") from None
    try:
        return Video(e["frames"], e["masks"], e["affines"])
    except KeyError as err:
        raise VideoError(f"video archive lacks {err}") from None


# ---------------------------------------------------------------------------
# scheduling


def keyframe_schedule(num: int, chunk: int = DEFAULT_CHUNK) -> list:
    """Chunk boundaries, each inpainted by the model: ``0, chunk, ...`` and the last frame."""
    if chunk < 1:
        raise VideoError(f"chunk must be positive, got {chunk}")
    if num < 1:
        return []
    return sorted(set(range(0, num, chunk)) | {num - 1})


def context_frames(t: int, num: int, offsets=DEFAULT_OFFSETS) -> list:
    """Frames at ``t ± offset`` ordered by offset, clamped into the video,
    without duplicates and without ``t`` itself. Clamping warns."""
    out, clamped = [], []
    for o in offsets:
        for u in (t - o, t + o):
            c = min(max(u, 0), num - 1)
            if c != u:
                clamped.append(u)
            if c != t and c not in out:
                out.append(c)
    if clamped:
        warnings.warn(f"context frames {clamped} for frame {t} clamped into [0, {num - 1}]", stacklevel=2)
    return out


# ---------------------------------------------------------------------------
# propagation


def prealign(video: Video, t: int, context: list) -> np.ndarray:
    """Model input for frame ``t`` with hole pixels copied from context frames
    wherever the flow is reliable and the source pixel is known."""
    x = video.masked(t)
    hole = x[..., 3] > 0.5
    for u in context:
        if not hole.any():
            break
        flow = video.flow(t, u)
        src = warp(video.masked(u), flow)
        ok = hole & (video.consistency(t, u)[..., 0] < PREALIGN_FB) & (src[..., 3] <= 1e-6)
        x[ok, :3] = src[ok, :3]
        x[ok, 3] = 0.0
        hole &= ~ok
    return x


@dataclass
class PropagationResult:
    frames: np.ndarray  # F×H×W×3 completed
    keyframes: list  # indices inpainted by the model
    inferences: int


def inpaint_frame(ckpt: Checkpoint, params: dict, video: Video, t: int, context: list, use_prealign: bool):
    dtype = next(iter(params.values())).dtype
    target = prealign(video, t, context) if use_prealign else video.masked(t)
    keys = np.stack([video.masked(u) for u in context]) if context else np.zeros((0,) + target.shape)
    flows = np.stack([video.flow(t, u).offsets for u in context]) if context else np.zeros((0,) + target.shape[:2] + (2,))
    fb = (
        np.stack([np.minimum(video.consistency(t, u), FB_CLIP) for u in context])
        if context
        else np.zeros((0,) + target.shape[:2] + (1,))
    )
    with no_grad():
        out = model_forward(
            ckpt.config, params, target.astype(dtype), keys.astype(dtype), flows.astype(dtype), fb.astype(dtype)
        )
    return out.data.astype(np.float64)


def propagate_video(
    ckpt: Checkpoint,
    video: Video,
    chunk: int = DEFAULT_CHUNK,
    offsets=DEFAULT_OFFSETS,
    use_prealign: bool = False,
) -> PropagationResult:
    """Complete every frame of ``video``.

    Chunk boundaries are inpainted by the model with context frames at the
    given offsets. Hole pixels of the frames in between are warped from the
    nearer boundary where the flow is consistent within 1 px, then from the
    other boundary, and whatever remains from the nearer boundary regardless.
    """
    n = len(video)
    params = ckpt.tensors(requires_grad=False)
    bounds = keyframe_schedule(n, chunk)
    done = {}
    for b in bounds:
        done[b] = inpaint_frame(ckpt, params, video, b, context_frames(b, n, offsets), use_prealign)
    out = np.empty(video.frames.shape)
    for t in range(n):
        if t in done:
            out[t] = done[t]
            continue
        i = np.searchsorted(bounds, t)
        lo, hi = bounds[i - 1], bounds[i]
        order = (lo, hi) if t - lo <= hi - t else (hi, lo)
        frame = video.masked(t)[..., :3].astype(np.float64)
        hole = video.masks[t][..., 0] > 0.5
        todo = hole.copy()
        for k in order:
            src = warp(done[k], video.flow(t, k))
            ok = todo & (video.consistency(t, k)[..., 0] <= PROPAGATE_FB)
            frame[ok] = src[ok]
            todo &= ~ok
        if todo.any():
            src = warp(done[order[0]], video.flow(t, order[0]))
            frame[todo] = src[todo]
        out[t] = frame
    return PropagationResult(out, bounds, len(bounds))


def video_hole_l1(result: PropagationResult, video: Video) -> float:
    """Mean absolute error over all hole pixels of all frames."""
    m = np.broadcast_to(video.masks, video.frames.shape)
    return float((np.abs(result.frames - video.frames) * m).sum() / max(m.sum(), 1.0))
