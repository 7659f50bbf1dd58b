"""Hermetic guided-inpainting samples with exact ground-truth flows.

Base images are procedural scenes that can be evaluated at any continuous
position, so a keyframe is rendered exactly at the warped coordinates instead
of being resampled from the target. Generation uses only integer seeding, the
PCG64 bit generator, uniform draws and IEEE-exact arithmetic (+ - * / sqrt
floor), which keeps outputs byte-identical across platforms.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import archive
from .flow import FlowField, bilinear_sample, fill_masked_flow, pixel_grid
from .tensor import no_grad

GENERATOR_VERSION = 1
MASK64 = (1 << 64) - 1

# tan(7.5 degrees): rotations up to ±15° are drawn through the half-angle
# tangent so sin/cos come from rational expressions, not libm.
TAN_HALF_MAX_ROT = 0.13165249758739585


@dataclass
class WarpParams:
    max_rotation_tan_half: float = TAN_HALF_MAX_ROT
    scale_range: tuple = (0.9, 1.1)
    max_translation: float = 0.1  # fraction of the extent
    amplitude_px: float = 4.0
    smoothness_px: float = 16.0


# ---------------------------------------------------------------------------
# seeds


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _key_int(key) -> int:
    if isinstance(key, int):
        return key & MASK64
    # FNV-1a 64
    h = 0xCBF29CE484222325
    for b in str(key).encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & MASK64
    return h


def sub_seed(seed: int, *keys) -> int:
    """Counter-style seed derivation: each key path gets its own stream, so a
    new consumer never perturbs existing ones."""
    h = splitmix64(seed & MASK64)
    for k in keys:
        h = splitmix64(h ^ _key_int(k))
    return h


def rng_for(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(sub_seed(seed, *keys)))


# ---------------------------------------------------------------------------
# procedural scenes


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _value_noise(grid: np.ndarray, xs, ys, w: int, h: int) -> np.ndarray:
    gh, gw = grid.shape[:2]
    u = np.clip(xs / max(w - 1, 1), 0.0, 1.0) * (gw - 1)
    v = np.clip(ys / max(h - 1, 1), 0.0, 1.0) * (gh - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), gw - 2)
    j0 = np.minimum(np.floor(v).astype(np.int64), gh - 2)
    fu = _smoothstep(u - i0)[..., None]
    fv = _smoothstep(v - j0)[..., None]
    a = grid[j0, i0] * (1 - fu) + grid[j0, i0 + 1] * fu
    b = grid[j0 + 1, i0] * (1 - fu) + grid[j0 + 1, i0 + 1] * fu
    return a * (1 - fv) + b * fv


@dataclass
class Scene:
    """Parameters of one procedural image; :meth:`render` evaluates it."""

    height: int
    width: int
    noise: list
    shapes: list = field(default_factory=list)
    patch: dict = field(default_factory=dict)
    grain: dict = field(default_factory=dict)

    def render(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        w, h = self.width, self.height
        img = np.zeros(xs.shape + (3,))
        for amp, grid in self.noise:
            img = img + amp * _value_noise(grid, xs, ys, w, h)
        for s in self.shapes:
            dx, dy = xs - s["cx"], ys - s["cy"]
            if s["kind"] == "rect":
                sd = np.maximum(np.abs(dx) - s["a"], np.abs(dy) - s["b"])
            else:
                r = np.sqrt((dx / s["a"]) ** 2 + (dy / s["b"]) ** 2)
                sd = (r - 1.0) * min(s["a"], s["b"])
            alpha = np.clip(0.5 - sd / s["edge"], 0.0, 1.0)[..., None]
            if s["gradient"] is None:
                col = s["c0"]
            else:
                t = dx if s["gradient"] == 0 else dy
                half = s["a"] if s["gradient"] == 0 else s["b"]
                t = np.clip(0.5 + 0.5 * t / half, 0.0, 1.0)[..., None]
                col = s["c0"] * (1 - t) + s["c1"] * t
            img = img * (1 - alpha) + col * alpha
        p = self.patch
        if p:
            dx, dy = xs - p["cx"], ys - p["cy"]
            sd = np.maximum(np.abs(dx) - p["a"], np.abs(dy) - p["b"])
            alpha = np.clip(0.5 - sd, 0.0, 1.0)[..., None]
            if p["kind"] == "checker":
                tx = xs / p["period"]
                ty = ys / p["period"]
                wave = _square(tx) * _square(ty)
            else:
                t = (xs * p["nx"] + ys * p["ny"]) / p["period"]
                wave = _square(t)
            t = (0.5 + 0.5 * wave)[..., None]
            col = p["c0"] * (1 - t) + p["c1"] * t
            img = img * (1 - alpha) + col * alpha
        g = self.grain
        if g:
            # one-pixel checker; keeps near-Nyquist energy in every image
            sd = np.maximum(np.abs(xs - g["cx"]) - g["a"], np.abs(ys - g["cy"]) - g["a"])
            alpha = np.clip(0.5 - sd, 0.0, 1.0)[..., None]
            t = ((np.floor(xs) + np.floor(ys)) % 2)[..., None]
            col = g["c0"] * (1 - t) + g["c1"] * t
            img = img * (1 - alpha) + col * alpha
        return np.clip(img, 0.0, 1.0)

    def render_grid(self, positions: np.ndarray | None = None) -> np.ndarray:
        if positions is None:
            positions = pixel_grid(self.height, self.width)
        return self.render(positions[..., 0], positions[..., 1])


def _square(t):
    """Period-1 square wave in [-1, 1] whose transitions are linear ramps a
    quarter period wide, so the pattern survives bilinear resampling."""
    ph = t - np.floor(t)
    tri = 1.0 - 4.0 * np.abs(ph - 0.5)  # triangle wave, +1 at integers
    return np.clip(2.0 * tri, -1.0, 1.0)


def gen_scene(seed: int, h: int, w: int) -> Scene:
    rng = rng_for(seed, "scene")
    noise = [(0.6, rng.random((5, 5, 3))), (0.35, rng.random((9, 9, 3)) - 0.5)]
    shapes = []
    for _ in range(int(rng.integers(3, 9))):
        shapes.append(
            {
                "kind": "rect" if rng.random() < 0.5 else "ellipse",
                "cx": rng.random() * w,
                "cy": rng.random() * h,
                "a": w * (1 / 16 + rng.random() * (1 / 4 - 1 / 16)),
                "b": h * (1 / 16 + rng.random() * (1 / 4 - 1 / 16)),
                "edge": 1.0,
                "c0": rng.random(3),
                "c1": rng.random(3),
                "gradient": [None, 0, 1][int(rng.integers(0, 3))],
            }
        )
    orient = int(rng.integers(0, 4))
    patch = {
        "kind": "checker" if orient == 3 else "stripes",
        "cx": w * (0.25 + 0.5 * rng.random()),
        "cy": h * (0.25 + 0.5 * rng.random()),
        "a": w * (0.06 + 0.06 * rng.random()),
        "b": h * (0.06 + 0.06 * rng.random()),
        "period": 4.0 + 2.0 * rng.random(),
        # horizontal, vertical or diagonal (unnormalised (1,1): period along x)
        "nx": [1.0, 0.0, 1.0, 0.0][orient],
        "ny": [0.0, 1.0, 1.0, 0.0][orient],
        "c0": rng.random(3) * 0.4,
        "c1": 0.6 + rng.random(3) * 0.4,
    }
    grain = {
        "cx": w * (0.2 + 0.6 * rng.random()),
        "cy": h * (0.2 + 0.6 * rng.random()),
        "a": 2.0 * w / 64,
        "c0": rng.random(3) * 0.2,
        "c1": 0.8 + rng.random(3) * 0.2,
    }
    return Scene(h, w, noise, shapes, patch, grain)


def gen_base_image(seed: int, h: int, w: int) -> np.ndarray:
    """Procedural RGB image in [0, 1]: value-noise background, 3-8 solid or
    gradient rectangles/ellipses, one stripe/checker patch and a small
    one-pixel checker grain."""
    return gen_scene(seed, h, w).render_grid()


def hf_energy_fraction(img: np.ndarray) -> float:
    """Share of non-DC spectral energy above 3/4 of the Nyquist radius."""
    from .spectral import _fft2_array, _pad_pow2

    x = np.asarray(img, dtype=np.float64)
    x = x - x.mean(axis=(0, 1), keepdims=True)
    f = _fft2_array(_pad_pow2(x))
    e = (np.abs(f) ** 2).sum(-1)
    r = radial_frequency(*e.shape)
    total = e.sum()
    return float(e[r > 0.375].sum() / total) if total > 0 else 0.0


def radial_frequency(h: int, w: int) -> np.ndarray:
    """Radius of each DFT bin in cycles per pixel (Nyquist = 0.5)."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    return np.sqrt(fx * fx + fy * fy)


# ---------------------------------------------------------------------------
# masks


def _polyline_mask(xs, ys, pts, thickness):
    hit = np.zeros(xs.shape, dtype=bool)
    r2 = (thickness / 2.0) ** 2
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        vx, vy = x1 - x0, y1 - y0
        ll = vx * vx + vy * vy
        t = np.clip(((xs - x0) * vx + (ys - y0) * vy) / max(ll, 1e-12), 0.0, 1.0)
        px, py = x0 + t * vx - xs, y0 + t * vy - ys
        hit |= px * px + py * py <= r2
    return hit


def gen_mask(seed: int, h: int, w: int, max_attempts: int = 32) -> np.ndarray:
    """Binary H×W×1 hole mask (1 = hole): 1-3 rectangles and 1-3 thick
    polylines, hole ratio kept within [5%, 50%]."""
    grid = pixel_grid(h, w)
    xs, ys = grid[..., 0], grid[..., 1]
    shrink = 1.0
    for attempt in range(max_attempts):
        rng = rng_for(seed, "mask", attempt)
        m = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            rw = w * shrink * (1 / 8 + rng.random() * (1 / 3 - 1 / 8))
            rh = h * shrink * (1 / 8 + rng.random() * (1 / 3 - 1 / 8))
            x0, y0 = rng.random() * (w - rw), rng.random() * (h - rh)
            m |= (xs >= x0) & (xs < x0 + rw) & (ys >= y0) & (ys < y0 + rh)
        for _ in range(int(rng.integers(1, 4))):
            n = int(rng.integers(2, 5))
            pts = [(rng.random() * w, rng.random() * h) for _ in range(n)]
            thick = (3.0 + rng.random() * 5.0) * shrink * w / 64
            m |= _polyline_mask(xs, ys, pts, thick)
        ratio = m.mean()
        if ratio > 0.5:
            shrink *= 0.8
            continue
        if ratio < 0.05:
            # grow a centred block until the minimum is met
            need = int(np.ceil(0.05 * h * w))
            side = int(np.ceil(np.sqrt(need)))
            cx, cy = int(rng.integers(0, max(w - side, 1))), int(rng.integers(0, max(h - side, 1)))
            m[cy : cy + side, cx : cx + side] = True
        if 0.05 <= m.mean() <= 0.5:
            return m[..., None].astype(np.float64)
    raise RuntimeError(f"gen_mask: no valid mask after {max_attempts} attempts (seed {seed})")


# ---------------------------------------------------------------------------
# warps


def random_affine(rng: np.random.Generator, h: int, w: int, params: WarpParams) -> np.ndarray:
    """Rotation, isotropic scale and translation about the image centre."""
    t = (2 * rng.random() - 1) * params.max_rotation_tan_half
    cos, sin = (1 - t * t) / (1 + t * t), 2 * t / (1 + t * t)
    lo, hi = params.scale_range
    s = lo + (hi - lo) * rng.random()
    tx = (2 * rng.random() - 1) * params.max_translation * w
    ty = (2 * rng.random() - 1) * params.max_translation * h
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    lin = s * np.array([[cos, -sin], [sin, cos]])
    c = np.array([cx, cy])
    offset = c - lin @ c + np.array([tx, ty])
    return np.concatenate([lin, offset[:, None]], axis=1)


def _box_blur(x: np.ndarray, radius: int, axis: int) -> np.ndarray:
    """Mean over a (2r+1) window with edge clamping, via cumulative sums."""
    if radius <= 0:
        return x
    pad = [(0, 0)] * x.ndim
    pad[axis] = (radius + 1, radius)
    c = np.cumsum(np.pad(x, pad, mode="edge"), axis=axis)
    n = x.shape[axis]
    hi = np.take(c, np.arange(2 * radius + 1, 2 * radius + 1 + n), axis=axis)
    lo = np.take(c, np.arange(0, n), axis=axis)
    return (hi - lo) / (2 * radius + 1)


def smooth_displacement(rng: np.random.Generator, h: int, w: int, amplitude: float, smoothness: float) -> np.ndarray:
    """Box-blurred (three passes) uniform white noise scaled so the largest
    component equals ``amplitude``."""
    d = rng.random((h, w, 2)) * 2 - 1
    if amplitude == 0:
        return np.zeros((h, w, 2))
    r = max(int(smoothness // 2), 1)
    for _ in range(3):
        d = _box_blur(_box_blur(d, r, 0), r, 1)
    peak = np.abs(d).max()
    return d * (amplitude / peak) if peak > 0 else d


class WarpError(RuntimeError):
    pass


def _apply_affine(A, pts):
    x, y = pts[..., 0], pts[..., 1]
    return np.stack([A[0, 0] * x + A[0, 1] * y + A[0, 2], A[1, 0] * x + A[1, 1] * y + A[1, 2]], axis=-1)


def invert_affine(A) -> np.ndarray:
    """Closed-form inverse of a 2×3 affine map (no LAPACK, platform exact)."""
    A = np.asarray(A, dtype=np.float64)
    a, b, c, d = A[0, 0], A[0, 1], A[1, 0], A[1, 1]
    det = a * d - b * c
    if abs(det) < 1e-12:
        raise ValueError("affine transform has a singular linear part")
    ia, ib, ic, id_ = d / det, -b / det, -c / det, a / det
    tx, ty = A[0, 2], A[1, 2]
    return np.array([[ia, ib, -(ia * tx + ib * ty)], [ic, id_, -(ic * tx + id_ * ty)]])


def _composed_warp(A, disp, h, w, iters):
    grid = pixel_grid(h, w)
    fwd = _apply_affine(A, grid) + disp - grid
    inv = invert_affine(A)
    inv_lin = inv.copy()
    inv_lin[:, 2] = 0.0
    q = grid
    p = _apply_affine(inv, q)
    with no_grad():
        for _ in range(iters):
            d = bilinear_sample(disp, p).data
            # p = A^-1 (q - d)
            p = _apply_affine(inv, q) - _apply_affine(inv_lin, d)
    return FlowField(fwd), FlowField(p - q)


def elastic_warp(
    seed: int,
    h: int,
    w: int,
    amplitude_px: float = 4.0,
    smoothness_px: float = 16.0,
    affine=None,
    params: WarpParams | None = None,
    iters: int = 10,
    max_residual: float = 0.1,
) -> tuple:
    """Forward/backward flow pair of ``p -> A·p + d(p)``.

    ``d`` is a smooth random displacement of peak ``amplitude_px``. ``affine``
    fixes ``A`` (2×3); by default it is drawn at random. The backward flow comes
    from ``iters`` fixed-point iterations; if the interior fb-consistency
    residual exceeds ``max_residual`` the displacement amplitude is halved and
    the warp regenerated.
    """
    from .flow import fb_consistency, valid_region

    if amplitude_px < 0 or (amplitude_px > 0 and amplitude_px >= smoothness_px / 2):
        raise ValueError(f"amplitude {amplitude_px} px must be below smoothness/2 = {smoothness_px / 2}")
    params = params or WarpParams()
    rng = rng_for(seed, "warp")
    A = random_affine(rng, h, w, params) if affine is None else np.asarray(affine, np.float64)
    noise_seed = sub_seed(seed, "warp", "noise")
    amp = amplitude_px
    for _ in range(8):
        disp = smooth_displacement(np.random.Generator(np.random.PCG64(noise_seed)), h, w, amp, smoothness_px)
        fwd, bwd = _composed_warp(A, disp, h, w, iters)
        valid = valid_region(fwd)
        if not valid.any():
            return fwd, bwd
        resid = fb_consistency(fwd, bwd).data[..., 0][valid].max()
        if resid < max_residual:
            return fwd, bwd
        amp *= 0.5
    raise WarpError(f"elastic_warp: inversion residual {resid:.3g} px after amplitude reduction")


# ---------------------------------------------------------------------------
# samples


@dataclass
class FrameSample:
    gt: np.ndarray  # H×W×3
    mask: np.ndarray  # H×W×1, 1 = hole
    target_in: np.ndarray  # H×W×4
    keyframes_in: np.ndarray  # T×H×W×4
    key_gt: np.ndarray  # T×H×W×3
    flows_fwd: list  # exact target->keyframe flows
    flows_bwd: list  # exact keyframe->target flows
    flows_fwd_filled: list  # flows with holes re-interpolated (model inputs)
    flows_bwd_filled: list
    seed: int

    @property
    def num_keyframes(self) -> int:
        return self.keyframes_in.shape[0]

    def subset(self, t: int) -> "FrameSample":
        return FrameSample(
            self.gt,
            self.mask,
            self.target_in,
            self.keyframes_in[:t],
            self.key_gt[:t],
            self.flows_fwd[:t],
            self.flows_bwd[:t],
            self.flows_fwd_filled[:t],
            self.flows_bwd_filled[:t],
            self.seed,
        )

    def to_entries(self) -> dict:
        out = {
            "gt": self.gt,
            "mask": self.mask,
            "target_in": self.target_in,
            "keyframes_in": self.keyframes_in,
            "key_gt": self.key_gt,
            "seed": np.array([self.seed >> 32, self.seed & 0xFFFFFFFF], dtype=np.float64),
        }
        for i in range(self.num_keyframes):
            out[f"flow.fwd.{i}"] = self.flows_fwd[i].offsets
            out[f"flow.bwd.{i}"] = self.flows_bwd[i].offsets
            out[f"flow.fwd_filled.{i}"] = self.flows_fwd_filled[i].offsets
            out[f"flow.bwd_filled.{i}"] = self.flows_bwd_filled[i].offsets
        return out

    @classmethod
    def from_entries(cls, e: dict) -> "FrameSample":
        t = e["keyframes_in"].shape[0]
        hi, lo = (int(v) for v in e["seed"])
        flows = lambda kind: [FlowField(e[f"flow.{kind}.{i}"]) for i in range(t)]  # noqa: E731
        return cls(
            e["gt"],
            e["mask"],
            e["target_in"],
            e["keyframes_in"],
            e["key_gt"],
            flows("fwd"),
            flows("bwd"),
            flows("fwd_filled"),
            flows("bwd_filled"),
            (hi << 32) | lo,
        )


def masked_input(rgb: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.concatenate([rgb * (1.0 - mask), mask], axis=-1)


def make_sample(seed: int, h: int = 64, w: int = 64, t: int = 2, params: WarpParams | None = None) -> FrameSample:
    """One guided-inpainting instance.

    Keyframe ``i`` depends only on ``(seed, i)``, so the first two keyframes
    of a T=4 sample equal those of the T=2 sample with the same seed.
    """
    params = params or WarpParams()
    scene = gen_scene(sub_seed(seed, "image"), h, w)
    gt = scene.render_grid()
    mask = gen_mask(sub_seed(seed, "mask", 0), h, w)
    keys_in, keys_gt, fwds, bwds, fwds_f, bwds_f = [], [], [], [], [], []
    for i in range(t):
        fwd, bwd = elastic_warp(
            sub_seed(seed, "key", i), h, w, params.amplitude_px, params.smoothness_px, params=params
        )
        kgt = scene.render_grid(bwd.positions())
        kmask = gen_mask(sub_seed(seed, "mask", i + 1), h, w)
        keys_gt.append(kgt)
        keys_in.append(masked_input(kgt, kmask))
        fwds.append(fwd)
        bwds.append(bwd)
        # emulate an estimator that cannot see inside holes
        fwds_f.append(fill_masked_flow(fwd, mask))
        bwds_f.append(fill_masked_flow(bwd, kmask))
    return FrameSample(
        gt=gt,
        mask=mask,
        target_in=masked_input(gt, mask),
        keyframes_in=np.stack(keys_in),
        key_gt=np.stack(keys_gt),
        flows_fwd=fwds,
        flows_bwd=bwds,
        flows_fwd_filled=fwds_f,
        flows_bwd_filled=bwds_f,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# datasets


class DatasetError(ValueError):
    pass


MANIFEST = "manifest.txt"


def write_dataset(directory, count: int, seed: int = 0, size: int = 64, keyframes: int = 2) -> list:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i in range(count):
        s = make_sample(sub_seed(seed, "sample", i), size, size, keyframes)
        path = os.path.join(directory, f"sample_{i}.kpt")
        archive.save(path, s.to_entries())
        paths.append(path)
    manifest = {
        "count": count,
        "height": size,
        "width": size,
        "keyframes": keyframes,
        "seed": seed,
        "generator_version": GENERATOR_VERSION,
    }
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8") as fh:
        fh.writelines(f"{k}={v}\n" for k, v in manifest.items())
    return paths


def read_manifest(directory) -> dict:
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise DatasetError(f"no {MANIFEST} in {directory}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                out[k.strip()] = int(v.strip())
    if out.get("generator_version") != GENERATOR_VERSION:
        raise DatasetError(
            f"dataset generator version {out.get('generator_version')} != {GENERATOR_VERSION}; regenerate it"
        )
    return out


def read_dataset(directory) -> list:
    manifest = read_manifest(directory)
    samples = []
    for i in range(manifest["count"]):
        s = FrameSample.from_entries(archive.load(os.path.join(directory, f"sample_{i}.kpt")))
        if s.gt.shape[:2] != (manifest["height"], manifest["width"]) or s.num_keyframes != manifest["keyframes"]:
            raise DatasetError(f"sample_{i}.kpt does not match the manifest")
        samples.append(s)
    return samples


def write_ppm(path, rgb: np.ndarray):
    """8-bit binary PPM (P6)."""
    rgb = np.asarray(rgb)
    if rgb.ndim == 3 and rgb.shape[-1] == 1:
        rgb = np.repeat(rgb, 3, axis=-1)
    img = np.clip(np.floor(rgb * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
