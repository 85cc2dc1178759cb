"""Image quality metrics for erasure results.

All metrics operate on images in the 8-bit value domain: uint8 arrays, or
float arrays already scaled to [0, 255]. RGB inputs are reduced to luminance
(0.299 R + 0.587 G + 0.114 B) where the metric is defined on gray levels.

The suite: PSNR, multi-scale SSIM (reported as a percentage), scaled MSE
(mean squared error on the [0, 1] scale, times 100), AGE (average absolute
gray-level difference), pEPs (fraction of pixels whose gray difference
exceeds a threshold) and pCEPS (fraction of error pixels whose entire
4-neighborhood is also erroneous; border pixels never qualify).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

PSNR_IDENTICAL = math.inf
PSNR_CAP_DB = 100.0  # stands in for infinite PSNR inside dataset averages
ERROR_THRESHOLD = 20  # gray levels; an "error pixel" differs by more than this

MSSIM_WINDOW = 11
MSSIM_SIGMA = 1.5
MSSIM_K1 = 0.01
MSSIM_K2 = 0.03
MSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class MetricReport:
    """Dataset-level metric values: unweighted means of per-image scores."""

    psnr: float
    mssim: float
    mse: float
    age: float
    peps: float
    pceps: float
    n_images: int
    n_psnr_capped: int = 0  # images with identical pred/gt folded in at PSNR_CAP_DB

    def as_dict(self) -> dict:
        return {
            "psnr": self.psnr,
            "mssim": self.mssim,
            "mse": self.mse,
            "age": self.age,
            "peps": self.peps,
            "pceps": self.pceps,
            "n_images": self.n_images,
            "n_psnr_capped": self.n_psnr_capped,
        }

    def format_text(self) -> str:
        lines = [
            f"psnr: {self.psnr:.4f}",
            f"mssim: {self.mssim:.4f}",
            f"mse: {self.mse:.6f}",
            f"age: {self.age:.4f}",
            f"peps: {self.peps:.6f}",
            f"pceps: {self.pceps:.6f}",
            f"n_images: {self.n_images}",
        ]
        if self.n_psnr_capped:
            lines.append(f"n_psnr_capped: {self.n_psnr_capped} (identical pairs at {PSNR_CAP_DB} dB)")
        return "\n".join(lines)


def _as_float(img) -> np.ndarray:
    arr = np.asarray(img)
    return arr.astype(np.float64)


def _check_shapes(pred, gt):
    pred = _as_float(pred)
    gt = _as_float(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def gray_level(img) -> np.ndarray:
    """Luminance on the 0-255 scale; pass-through for single-channel input."""
    arr = _as_float(img)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] == 1:
        return arr[:, :, 0]
    if arr.ndim == 3 and arr.shape[2] == 3:
        return 0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2]
    raise ValueError(f"expected (H, W[, 1|3]) image, got {arr.shape}")


def psnr(pred, gt) -> float:
    """Peak signal-to-noise ratio in dB over all pixels and channels.

    Identical inputs return the +inf sentinel.
    """
    pred, gt = _check_shapes(pred, gt)
    mse255 = float(np.mean((pred - gt) ** 2))
    if mse255 == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(255.0 ** 2 / mse255)


def mse_scaled(pred, gt) -> float:
    """Mean squared error computed on the [0, 1] scale, multiplied by 100."""
    pred, gt = _check_shapes(pred, gt)
    return float(np.mean((pred / 255.0 - gt / 255.0) ** 2)) * 100.0


def age(pred, gt) -> float:
    """Average absolute gray-level difference."""
    pred, gt = _check_shapes(pred, gt)
    return float(np.mean(np.abs(gray_level(pred) - gray_level(gt))))


def error_pixels(pred, gt, threshold: float = ERROR_THRESHOLD) -> np.ndarray:
    pred, gt = _check_shapes(pred, gt)
    return np.abs(gray_level(pred) - gray_level(gt)) > threshold


def peps(pred, gt, threshold: float = ERROR_THRESHOLD) -> float:
    """Fraction of pixels whose gray difference exceeds `threshold`."""
    return float(np.mean(error_pixels(pred, gt, threshold)))


def pceps(pred, gt, threshold: float = ERROR_THRESHOLD) -> float:
    """Fraction of pixels that are error pixels with all four 4-connected
    neighbors also erroneous. Border pixels never qualify, so pceps <= peps."""
    err = error_pixels(pred, gt, threshold)
    clustered = np.zeros_like(err)
    if err.shape[0] > 2 and err.shape[1] > 2:
        clustered[1:-1, 1:-1] = (
            err[1:-1, 1:-1]
            & err[:-2, 1:-1]
            & err[2:, 1:-1]
            & err[1:-1, :-2]
            & err[1:-1, 2:]
        )
    return float(np.mean(clustered))


# ---------------------------------------------------------------------------
# multi-scale SSIM


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _valid_filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2-D correlation, valid region only."""
    r = len(kernel) // 2
    out = correlate1d(img, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    if r:
        out = out[r:-r, r:-r]
    return out


def _ssim_terms(a: np.ndarray, b: np.ndarray, window: int):
    kernel = _gaussian_kernel(window, MSSIM_SIGMA)
    c1 = (MSSIM_K1 * 255.0) ** 2
    c2 = (MSSIM_K2 * 255.0) ** 2
    mu_a = _valid_filter(a, kernel)
    mu_b = _valid_filter(b, kernel)
    var_a = _valid_filter(a * a, kernel) - mu_a ** 2
    var_b = _valid_filter(b * b, kernel) - mu_b ** 2
    cov = _valid_filter(a * b, kernel) - mu_a * mu_b
    luminance = (2.0 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    return float(np.mean(luminance * cs)), float(np.mean(cs))


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    return img[: h2 * 2, : w2 * 2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def mssim_scales(height: int, width: int) -> int:
    """Number of dyadic scales usable with the standard 11-pixel window."""
    n = 0
    side = min(height, width)
    while n < len(MSSIM_WEIGHTS) and side >= MSSIM_WINDOW:
        n += 1
        side //= 2
    return n


def mssim(pred, gt) -> float:
    """Multi-scale SSIM as a percentage (100 = identical).

    Uses the canonical five scale weights, an 11x11 Gaussian window with
    sigma 1.5 evaluated on valid positions only, and 2x2 mean downsampling
    between scales (trailing odd rows/columns dropped). Inputs too small for
    five scales use fewer scales with the leading weights renormalized;
    inputs narrower than the window fall back to a single scale with the
    largest odd window that fits. Negative terms are clamped to zero before
    exponentiation. RGB inputs are compared on the luminance channel.
    """
    pred, gt = _check_shapes(pred, gt)
    a = gray_level(pred)
    b = gray_level(gt)
    n_scales = mssim_scales(*a.shape)
    if n_scales == 0:
        window = min(a.shape)
        window -= (window + 1) % 2  # largest odd window that fits
        if window < 1:
            raise ValueError(f"image too small for SSIM: {a.shape}")
        n_scales = 1
    else:
        window = MSSIM_WINDOW
    weights = np.asarray(MSSIM_WEIGHTS[:n_scales], dtype=np.float64)
    if n_scales < len(MSSIM_WEIGHTS):
        weights = weights / weights.sum()

    value = 1.0
    for scale in range(n_scales):
        ssim_mean, cs_mean = _ssim_terms(a, b, window)
        if scale < n_scales - 1:
            value *= max(cs_mean, 0.0) ** weights[scale]
            a = _downsample2(a)
            b = _downsample2(b)
        else:
            value *= max(ssim_mean, 0.0) ** weights[scale]
    return 100.0 * value


# ---------------------------------------------------------------------------
# compositing protocol and dataset evaluation


def composite_non_text(pred, input_image, mask) -> np.ndarray:
    """Replace everything outside the erase mask with the original input.

    output = mask * pred + (1 - mask) * input, exact per pixel per channel.
    """
    pred = np.asarray(pred)
    input_image = np.asarray(input_image)
    mask = np.asarray(mask)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[:, :, 0]
    if pred.shape != input_image.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs input {input_image.shape}")
    if mask.shape != pred.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {pred.shape[:2]}")
    if not np.all(np.isin(np.unique(mask), (0, 1))):
        raise ValueError("mask must be binary {0, 1}")
    if pred.ndim == 3:
        return np.where((mask > 0)[:, :, None], pred, input_image)
    return np.where(mask > 0, pred, input_image)


def compute_pair(pred, gt) -> dict:
    """All per-image metrics for one prediction/ground-truth pair."""
    return {
        "psnr": psnr(pred, gt),
        "mssim": mssim(pred, gt),
        "mse": mse_scaled(pred, gt),
        "age": age(pred, gt),
        "peps": peps(pred, gt),
        "pceps": pceps(pred, gt),
    }


def evaluate_dataset(predictor, dataset, protocol: str = "raw") -> MetricReport:
    """Score predictions over a dataset of triplets.

    `predictor` is either a callable mapping a triplet to a uint8 prediction,
    or a directory containing `<sample_id>.png` prediction files. With
    protocol "composited", non-mask pixels of each prediction are replaced by
    the input before scoring; "raw" scores the prediction as is.
    """
    if protocol not in ("raw", "composited"):
        raise ValueError(f"unknown protocol {protocol!r}; use 'raw' or 'composited'")
    dataset = list(dataset)
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    if isinstance(predictor, (str, Path)):
        pred_dir = Path(predictor)

        def predictor(triplet, _dir=pred_dir):
            from .png_io import read_image

            if triplet.sample_id is None:
                raise ValueError("directory evaluation needs triplets with sample ids")
            return read_image(_dir / f"{triplet.sample_id}.png")

    per_image = []
    for triplet in dataset:
        pred = np.asarray(predictor(triplet))
        if pred.shape != triplet.gt.shape:
            raise ValueError(
                f"prediction shape {pred.shape} != gt shape {triplet.gt.shape}"
                + (f" (sample {triplet.sample_id})" if triplet.sample_id else "")
            )
        if protocol == "composited":
            pred = composite_non_text(pred, triplet.image, triplet.mask)
        per_image.append(compute_pair(pred, triplet.gt))

    psnrs = [m["psnr"] for m in per_image]
    finite = [p for p in psnrs if math.isfinite(p)]
    n_capped = len(psnrs) - len(finite)
    if not finite:
        mean_psnr = PSNR_IDENTICAL
    else:
        mean_psnr = float(np.mean([p if math.isfinite(p) else PSNR_CAP_DB for p in psnrs]))
    return MetricReport(
        psnr=mean_psnr,
        mssim=float(np.mean([m["mssim"] for m in per_image])),
        mse=float(np.mean([m["mse"] for m in per_image])),
        age=float(np.mean([m["age"] for m in per_image])),
        peps=float(np.mean([m["peps"] for m in per_image])),
        pceps=float(np.mean([m["pceps"] for m in per_image])),
        n_images=len(per_image),
        n_psnr_capped=n_capped,
    )
