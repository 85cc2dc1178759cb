"""Synthetic text-scene generation and triplet assembly.

A scene is a procedural background plus a set of non-overlapping rendered
text instances. From a scene we derive training triplets: the full render,
a binary mask over the instances chosen for erasure, and a ground truth in
which exactly those instances are absent. Because we re-render rather than
inpaint, the ground truth is exact outside the instance polygons.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

_ALPHABET = string.ascii_letters + string.digits
_PATCH_MARGIN = 3  # px of transparent inset; keeps bilinear bleed inside the polygon


@dataclass
class TextInstance:
    """One rendered text snippet with its covering polygon.

    The polygon is a simple quadrilateral in pixel-center coordinates
    (x = column, y = row): a pixel belongs to the instance region iff its
    center lies inside or on the polygon.
    """

    id: int
    polygon: list[tuple[float, float]]
    text: str
    render_params: dict = field(default_factory=dict)


@dataclass
class SceneSample:
    """A background image plus pairwise non-overlapping text instances."""

    background: np.ndarray  # uint8 (H, W, 3)
    instances: list[TextInstance]

    @property
    def height(self) -> int:
        return self.background.shape[0]

    @property
    def width(self) -> int:
        return self.background.shape[1]


@dataclass
class Triplet:
    """An input image, the erase mask, and the matching ground truth.

    `mask` is uint8 (H, W) with values {0, 1}; 1 marks pixels to erase.
    `preserved_mask` covers the instances that were NOT selected for
    erasure. `sample_id` and `instances` carry provenance when available.
    """

    image: np.ndarray
    mask: np.ndarray
    gt: np.ndarray
    preserved_mask: np.ndarray | None = None
    seed: int = 0
    sample_id: str | None = None
    instances: list[TextInstance] | None = None

    def validate(self) -> "Triplet":
        if self.image.shape != self.gt.shape:
            raise ValueError(f"image {self.image.shape} and gt {self.gt.shape} differ")
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {self.image.shape}")
        if self.mask.shape[:2] != self.image.shape[:2]:
            raise ValueError(
                f"mask {self.mask.shape} does not match image {self.image.shape[:2]}"
            )
        if self.mask.ndim != 2:
            raise ValueError(f"mask must be (H, W), got {self.mask.shape}")
        if not np.all(np.isin(np.unique(self.mask), (0, 1))):
            raise ValueError("mask values must be {0, 1}")
        return self


# ---------------------------------------------------------------------------
# fonts


def find_default_font() -> str | None:
    """Path to a bundled scalable font, if one is importable.

    matplotlib ships DejaVu; if it is absent we fall back to Pillow's
    built-in font (returned as None and resolved by `load_font`).
    """
    try:
        import matplotlib

        import os

        path = os.path.join(
            matplotlib.get_data_path(), "fonts", "ttf", "DejaVuSans.ttf"
        )
        if os.path.exists(path):
            return path
    except Exception:
        pass
    return None


def load_font(font_path: str | None, size: int) -> ImageFont.FreeTypeFont:
    if font_path is None:
        font_path = find_default_font()
    if font_path is None:
        return ImageFont.load_default(size=size)
    return ImageFont.truetype(font_path, size)


# ---------------------------------------------------------------------------
# polygon rasterization


def fill_polygons(polygons, height: int, width: int) -> np.ndarray:
    """Binary (H, W) uint8 map: 1 where a pixel center is inside or on any polygon."""
    mask = np.zeros((height, width), dtype=np.uint8)
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
            raise ValueError(f"polygon needs >= 3 (x, y) vertices, got shape {pts.shape}")
        x0 = max(0, int(math.floor(pts[:, 0].min())))
        x1 = min(width - 1, int(math.ceil(pts[:, 0].max())))
        y0 = max(0, int(math.floor(pts[:, 1].min())))
        y1 = min(height - 1, int(math.ceil(pts[:, 1].max())))
        if x1 < x0 or y1 < y0:
            continue
        xs, ys = np.meshgrid(
            np.arange(x0, x1 + 1, dtype=np.float64),
            np.arange(y0, y1 + 1, dtype=np.float64),
        )
        mask[y0 : y1 + 1, x0 : x1 + 1] |= _points_in_polygon(xs, ys, pts)
    return mask


def _points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    boundary = np.zeros(px.shape, dtype=bool)
    n = poly.shape[0]
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        eps = 1e-9 * max(1.0, abs(x2 - x1) + abs(y2 - y1))
        on_seg = (
            (np.abs(cross) <= eps)
            & (px >= min(x1, x2) - 1e-9)
            & (px <= max(x1, x2) + 1e-9)
            & (py >= min(y1, y2) - 1e-9)
            & (py <= max(y1, y2) + 1e-9)
        )
        boundary |= on_seg
        crosses = (y1 > py) != (y2 > py)
        if np.any(crosses):
            with np.errstate(divide="ignore", invalid="ignore"):
                x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (px < x_at)
    return inside | boundary


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Grow a binary mask by `radius` pixels (square structuring element)."""
    if radius <= 0:
        return mask
    grown = ndimage.binary_dilation(mask > 0, structure=np.ones((3, 3)), iterations=radius)
    return grown.astype(np.uint8)


# ---------------------------------------------------------------------------
# text patch rendering


def _render_text_patch(text, font, color, rotation_deg):
    """Render `text` as an RGBA patch; return (patch, quad) where quad holds the
    four corner coordinates (continuous, patch frame) bounding all ink."""
    left, top, right, bottom = font.getbbox(text)
    tw = max(1, right - left)
    th = max(1, bottom - top)
    w = tw + 2 * _PATCH_MARGIN
    h = th + 2 * _PATCH_MARGIN
    patch = Image.new("RGBA", (w, h), (0, 0, 0, 0))
    draw = ImageDraw.Draw(patch)
    draw.text((_PATCH_MARGIN - left, _PATCH_MARGIN - top), text, font=font, fill=tuple(color) + (255,))
    if rotation_deg:
        patch = patch.rotate(rotation_deg, expand=True, resample=Image.BILINEAR)
        quad = _rotated_rect_corners(w, h, rotation_deg)
    else:
        quad = [(0.0, 0.0), (float(w), 0.0), (float(w), float(h)), (0.0, float(h))]
    return patch, quad


def _rotated_rect_corners(w, h, angle_deg):
    """Corners of a (w, h) rect after PIL rotate(angle, expand=True), in the
    expanded canvas frame. Matches PIL's size arithmetic exactly."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    cx, cy = w / 2.0, h / 2.0
    rel = [(-cx, -cy), (w - cx, -cy), (w - cx, h - cy), (-cx, h - cy)]
    rot = [(c * x + s * y, -s * x + c * y) for x, y in rel]
    xs = [p[0] + cx for p in rot]
    ys = [p[1] + cy for p in rot]
    nw = math.ceil(max(xs)) - math.floor(min(xs))
    nh = math.ceil(max(ys)) - math.floor(min(ys))
    return [(x + nw / 2.0, y + nh / 2.0) for x, y in rot]


def _instance_patch(inst: TextInstance, font_cache: dict) -> tuple[Image.Image, tuple[int, int]]:
    rp = inst.render_params
    key = (rp.get("font"), rp["font_size"])
    font = font_cache.get(key)
    if font is None:
        font = load_font(rp.get("font"), rp["font_size"])
        font_cache[key] = font
    patch, _ = _render_text_patch(inst.text, font, rp["color"], rp["rotation"])
    return patch, rp["position"]


# ---------------------------------------------------------------------------
# backgrounds


def _make_background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    kind = int(rng.integers(0, 4))
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    c0 = rng.uniform(30, 225, size=3)
    c1 = rng.uniform(30, 225, size=3)
    if kind == 0:  # linear gradient, random direction
        theta = rng.uniform(0, 2 * np.pi)
        t = (np.cos(theta) * xs + np.sin(theta) * ys)
        t = (t - t.min()) / max(np.ptp(t), 1e-9)
        img = c0[None, None, :] + t[:, :, None] * (c1 - c0)[None, None, :]
    elif kind == 1:  # radial gradient
        cy, cx = rng.uniform(0.2, 0.8) * height, rng.uniform(0.2, 0.8) * width
        t = np.hypot(ys - cy, xs - cx)
        t = t / max(t.max(), 1e-9)
        img = c0[None, None, :] + t[:, :, None] * (c1 - c0)[None, None, :]
    elif kind == 2:  # smooth colored noise
        sigma = rng.uniform(3.0, 9.0)
        noise = rng.standard_normal((height, width, 3))
        noise = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0))
        lo, hi = noise.min(), noise.max()
        t = (noise - lo) / max(hi - lo, 1e-9)
        img = c0[None, None, :] + t * (c1 - c0)[None, None, :]
    else:  # flat color with light grain
        grain = ndimage.gaussian_filter(rng.standard_normal((height, width, 1)), sigma=(1.5, 1.5, 0))
        img = c0[None, None, :] + 12.0 * grain
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# scene construction and rendering


def make_scene(
    height: int,
    width: int,
    seed: int,
    *,
    min_instances: int = 2,
    max_instances: int = 4,
    font_path: str | None = None,
    font_size_range: tuple[int, int] | None = None,
    max_rotation: float = 12.0,
    background: np.ndarray | None = None,
    max_tries: int = 40,
) -> SceneSample:
    """Build a random scene with non-overlapping text instances.

    Deterministic given all arguments. Instance placement rejects any overlap
    at the bounding-box level, which is conservative but guarantees the
    pairwise non-overlap invariant of the polygons themselves.
    """
    rng = np.random.default_rng(seed)
    if background is None:
        background = _make_background(rng, height, width)
    else:
        background = np.asarray(background, dtype=np.uint8)
        if background.shape != (height, width, 3):
            raise ValueError(f"background shape {background.shape} != {(height, width, 3)}")
    if font_path is None:
        font_path = find_default_font()
    if font_size_range is None:
        lo = max(9, height // 8)
        font_size_range = (lo, max(lo + 1, height // 4))

    light_bg = background.mean() > 127
    font_cache: dict = {}
    instances: list[TextInstance] = []
    boxes: list[tuple[int, int, int, int]] = []
    n_target = int(rng.integers(min_instances, max_instances + 1))
    next_id = 0
    for _ in range(n_target):
        for _attempt in range(max_tries):
            size = int(rng.integers(font_size_range[0], font_size_range[1] + 1))
            length = int(rng.integers(3, 9))
            text = "".join(_ALPHABET[i] for i in rng.integers(0, len(_ALPHABET), size=length))
            rotation = float(rng.uniform(-max_rotation, max_rotation))
            if light_bg:
                color = tuple(int(v) for v in rng.integers(0, 90, size=3))
            else:
                color = tuple(int(v) for v in rng.integers(170, 256, size=3))
            key = (font_path, size)
            font = font_cache.get(key)
            if font is None:
                font = load_font(font_path, size)
                font_cache[key] = font
            patch, quad = _render_text_patch(text, font, color, rotation)
            pw, ph = patch.size
            if pw > width - 2 or ph > height - 2:
                continue
            px = int(rng.integers(1, width - 1 - pw + 1))
            py = int(rng.integers(1, height - 1 - ph + 1))
            box = (px, py, px + pw, py + ph)
            if any(_boxes_overlap(box, b) for b in boxes):
                continue
            polygon = [(x + px - 0.5, y + py - 0.5) for x, y in quad]
            instances.append(
                TextInstance(
                    id=next_id,
                    polygon=polygon,
                    text=text,
                    render_params={
                        "font": font_path,
                        "font_size": size,
                        "color": color,
                        "rotation": rotation,
                        "position": (px, py),
                    },
                )
            )
            boxes.append(box)
            next_id += 1
            break
    return SceneSample(background=background, instances=instances)


def _boxes_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def render_scene(sample: SceneSample, include) -> np.ndarray:
    """Composite the background with exactly the instances whose ids are in `include`."""
    ids = {inst.id for inst in sample.instances}
    include = set(include)
    unknown = include - ids
    if unknown:
        raise ValueError(f"unknown instance ids: {sorted(unknown)}")
    canvas = Image.fromarray(sample.background, mode="RGB").convert("RGBA")
    font_cache: dict = {}
    for inst in sorted(sample.instances, key=lambda i: i.id):
        if inst.id not in include:
            continue
        patch, position = _instance_patch(inst, font_cache)
        canvas.alpha_composite(patch, dest=position)
    return np.asarray(canvas.convert("RGB"))


def select_instances(instances, alpha: float, seed: int) -> set[int]:
    """Choose instances for erasure: each one is independently excluded with
    probability `alpha` and kept as an erasure target with probability 1 - alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    rng = np.random.default_rng(seed)
    selected = set()
    for inst in instances:
        if rng.random() >= alpha:
            selected.add(inst.id)
    return selected


def rasterize_mask(instances, height: int, width: int) -> np.ndarray:
    """Union of the instance polygons as a {0,1} uint8 (H, W) map."""
    return fill_polygons([inst.polygon for inst in instances], height, width)


def make_triplet(sample: SceneSample, alpha: float, seed: int) -> Triplet:
    """Derive a training triplet from a scene.

    The image renders every instance; the ground truth renders only the
    unselected ones, so the mask region is backed by exact content. An empty
    selection is a legal no-op sample (mask all zero, gt == image).
    """
    selected_ids = select_instances(sample.instances, alpha, seed)
    selected = [i for i in sample.instances if i.id in selected_ids]
    unselected = [i for i in sample.instances if i.id not in selected_ids]
    image = render_scene(sample, {i.id for i in sample.instances})
    gt = render_scene(sample, {i.id for i in unselected})
    h, w = sample.height, sample.width
    return Triplet(
        image=image,
        mask=rasterize_mask(selected, h, w),
        gt=gt,
        preserved_mask=rasterize_mask(unselected, h, w),
        seed=seed,
        instances=list(sample.instances),
    ).validate()


def compose_partial_gt(image: np.ndarray, gt_all_removed: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Partial ground truth: erased content inside the mask, input elsewhere.

    output = mask * gt_all_removed + (1 - mask) * image, per pixel per channel.
    This is how a partial-erasure test set is derived from an all-text-removed
    dataset without re-annotation.
    """
    image = np.asarray(image)
    gt_all_removed = np.asarray(gt_all_removed)
    mask = np.asarray(mask)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[:, :, 0]
    if image.shape != gt_all_removed.shape:
        raise ValueError(f"image {image.shape} and gt {gt_all_removed.shape} differ")
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    return np.where((mask > 0)[:, :, None], gt_all_removed, image)
