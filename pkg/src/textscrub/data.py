"""On-disk dataset layout: reading and writing triplet directories.

Layout::

    <root>/images/<id>.png   input image
    <root>/gts/<id>.png      ground truth with all annotated text removed
    <root>/anns/<id>.json    list of {"id": int, "polygon": [[x, y], ...], "text": str}
    <root>/masks/<id>.png    optional prepared mask (8-bit, values 0/255);
                             takes precedence over rasterizing the annotations

Masks are produced at load time from the annotation polygons unless a
prepared mask is present. Samples are returned in lexicographic id order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .png_io import read_image, read_mask, write_mask, write_png
from .synth import TextInstance, Triplet, dilate_mask, fill_polygons


class DatasetError(Exception):
    """A sample failed to load; the message names the offending sample id."""


def save_dataset(root, triplets, *, write_masks: bool = False, start_index: int = 0) -> list[str]:
    """Write triplets in the directory layout above. Returns the sample ids.

    The stored gt is the triplet's gt image; annotations come from the
    triplet's instance list when present (all instances, matching the
    convention that the stored gt has every annotated instance removed).
    """
    root = Path(root)
    for sub in ("images", "gts", "anns"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    if write_masks:
        (root / "masks").mkdir(parents=True, exist_ok=True)
    ids = []
    for i, t in enumerate(triplets):
        sid = t.sample_id or f"{start_index + i:06d}"
        write_png(root / "images" / f"{sid}.png", t.image)
        write_png(root / "gts" / f"{sid}.png", t.gt)
        anns = [
            {"id": inst.id, "polygon": [[float(x), float(y)] for x, y in inst.polygon], "text": inst.text}
            for inst in (t.instances or [])
        ]
        with open(root / "anns" / f"{sid}.json", "w", encoding="utf-8") as fh:
            json.dump(anns, fh)
        if write_masks:
            write_mask(root / "masks" / f"{sid}.png", t.mask)
        ids.append(sid)
    return ids


def load_dataset_dir(root, *, dilate: int = 0) -> list[Triplet]:
    """Load a dataset directory into triplets, sorted lexicographically by id.

    The mask is the union of all annotated polygons (the stored gt removes
    all of them), or the prepared mask file when one exists. `dilate` grows
    the mask by that many pixels.
    """
    root = Path(root)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise DatasetError(f"{root} has no images/ directory")
    ids = sorted(p.stem for p in images_dir.glob("*.png"))
    if not ids:
        raise DatasetError(f"{images_dir} contains no .png files")
    triplets = []
    for sid in ids:
        triplets.append(_load_sample(root, sid, dilate))
    return triplets


def _load_sample(root: Path, sid: str, dilate: int) -> Triplet:
    try:
        image = read_image(root / "images" / f"{sid}.png")
    except Exception as exc:
        raise DatasetError(f"sample {sid}: cannot read image: {exc}") from exc
    gt_path = root / "gts" / f"{sid}.png"
    if not gt_path.exists():
        raise DatasetError(f"sample {sid}: missing ground truth {gt_path}")
    gt = read_image(gt_path)
    if gt.shape != image.shape:
        raise DatasetError(f"sample {sid}: gt shape {gt.shape} != image shape {image.shape}")

    instances = None
    ann_path = root / "anns" / f"{sid}.json"
    if ann_path.exists():
        try:
            with open(ann_path, encoding="utf-8") as fh:
                anns = json.load(fh)
            instances = [
                TextInstance(
                    id=int(a["id"]),
                    polygon=[(float(x), float(y)) for x, y in a["polygon"]],
                    text=str(a.get("text", "")),
                )
                for a in anns
            ]
        except DatasetError:
            raise
        except Exception as exc:
            raise DatasetError(f"sample {sid}: bad annotation file: {exc}") from exc

    mask_path = root / "masks" / f"{sid}.png"
    h, w = image.shape[:2]
    if mask_path.exists():
        try:
            mask = read_mask(mask_path)
        except ValueError as exc:
            raise DatasetError(f"sample {sid}: {exc}") from exc
        if mask.shape != (h, w):
            raise DatasetError(f"sample {sid}: mask shape {mask.shape} != image {(h, w)}")
    elif instances is not None:
        mask = fill_polygons([inst.polygon for inst in instances], h, w)
    else:
        raise DatasetError(f"sample {sid}: no annotations and no prepared mask")
    if dilate:
        mask = dilate_mask(mask, dilate)

    return Triplet(
        image=image, mask=mask, gt=gt, seed=0, sample_id=sid, instances=instances
    ).validate()
