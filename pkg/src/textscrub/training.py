"""Training loop, loss, learning-rate schedule, and the ablation runner.

The loss is a sum of per-iteration L1 distances with exponentially
increasing weights: total = sum_k lambda^(K-k) * mean|gt - I_k|, lambda in
(0, 1], so later iterations dominate. L1 is reduced by MEAN over pixels and
channels, which keeps the loss scale independent of the crop size.

The learning rate follows a single warmup/decay cycle: linear from
base_lr/25 up to base_lr over the first 30% of steps, then cosine decay
down to base_lr/1e4.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .metrics import evaluate_dataset
from .model import EraserNet, ModelConfig, count_parameters, init_model, model_predictor
from .synth import Triplet, compose_partial_gt, rasterize_mask, select_instances

SUPERVISE_MODES = ("all_iterations", "final_only")
PREDICT_MODES = ("residual", "direct")
MASK_MODES = ("part", "all", "none")

WARMUP_FRACTION = 0.3
LR_START_DIV = 25.0
LR_FINAL_DIV = 1e4
ADAM_BETAS = (0.9, 0.999)


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    epochs: int = 1
    batch_size: int = 2
    crop: int = 256
    lam: float = 0.85  # iteration-weight base; file key "lambda"
    iterations: int = 8
    alpha: float = 0.4
    seed: int = 0
    supervise: str = "all_iterations"
    predict: str = "residual"
    use_context: bool = True
    use_prev_image: bool = True
    share_weights: bool = True
    mask_mode: str = "part"

    def validate(self) -> "TrainConfig":
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must be in (0, 1], got {self.lam}")
        if self.batch_size < 1 or self.crop < 1 or self.epochs < 0 or self.iterations < 1:
            raise ValueError("batch_size, crop, iterations must be >= 1 and epochs >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.supervise not in SUPERVISE_MODES:
            raise ValueError(f"supervise must be one of {SUPERVISE_MODES}, got {self.supervise!r}")
        if self.predict not in PREDICT_MODES:
            raise ValueError(f"predict must be one of {PREDICT_MODES}, got {self.predict!r}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        return self


# the flat key/value config file uses these keys; "lambda" maps to .lam
_FILE_KEY_TO_ATTR = {
    "base_lr": "base_lr",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "crop": "crop",
    "lambda": "lam",
    "iterations": "iterations",
    "alpha": "alpha",
    "seed": "seed",
    "supervise": "supervise",
    "predict": "predict",
    "use_context": "use_context",
    "use_prev_image": "use_prev_image",
    "share_weights": "share_weights",
    "mask_mode": "mask_mode",
}
_ATTR_TO_FILE_KEY = {v: k for k, v in _FILE_KEY_TO_ATTR.items()}


def load_train_config(path) -> TrainConfig:
    """Parse a flat `key = value` config file; '#' starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, _, value = (part.strip() for part in line.partition("="))
            if key not in _FILE_KEY_TO_ATTR:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[_FILE_KEY_TO_ATTR[key]] = value
    kwargs = {}
    for attr, raw_value in values.items():
        current = getattr(TrainConfig, attr)
        if isinstance(current, bool):
            if raw_value.lower() not in ("true", "false"):
                raise ValueError(f"{path}: key {_ATTR_TO_FILE_KEY[attr]} must be true/false")
            kwargs[attr] = raw_value.lower() == "true"
        elif isinstance(current, int):
            kwargs[attr] = int(raw_value)
        elif isinstance(current, float):
            kwargs[attr] = float(raw_value)
        else:
            kwargs[attr] = raw_value
    return TrainConfig(**kwargs).validate()


def save_train_config(path, config: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for attr, value in asdict(config).items():
            key = _ATTR_TO_FILE_KEY[attr]
            if isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{key} = {value}\n")


@dataclass
class LossReport:
    """Per-step record: weighted total plus the unweighted per-iteration L1 means."""

    total: float
    per_iteration: list[float] = field(default_factory=list)
    step: int = 0
    lr: float = 0.0

    def as_dict(self) -> dict:
        return {"step": self.step, "lr": self.lr, "total": self.total, "per_iteration": self.per_iteration}


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; carries step diagnostics."""

    def __init__(self, step, lr, terms):
        self.step = step
        self.lr = lr
        self.terms = terms
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:.3e}); per-iteration terms: {terms}"
        )


def _to_numpy(x) -> np.ndarray:
    if torch.is_tensor(x):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def weighted_l1_loss(predictions, target, lam: float, step: int = 0, lr: float = 0.0) -> LossReport:
    """Exponentially weighted sum of mean-L1 distances over the iteration list."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    preds = list(predictions)
    if not preds:
        raise ValueError("predictions must be non-empty")
    gt = _to_numpy(target)
    per = []
    for p in preds:
        arr = _to_numpy(p)
        if arr.shape != gt.shape:
            raise ValueError(f"prediction shape {arr.shape} != target shape {gt.shape}")
        per.append(float(np.mean(np.abs(gt - arr))))
    k_total = len(per)
    total = float(sum(lam ** (k_total - 1 - i) * v for i, v in enumerate(per)))
    return LossReport(total=total, per_iteration=per, step=step, lr=lr)


def lr_schedule(step: int, total_steps: int, base_lr: float) -> float:
    """Single-cycle schedule: linear warmup to the peak at 30% of the run,
    cosine decay afterwards. Continuous and strictly positive."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    start = base_lr / LR_START_DIV
    final = base_lr / LR_FINAL_DIV
    warmup = int(round(WARMUP_FRACTION * (total_steps - 1)))
    if step <= warmup:
        if warmup == 0:
            return base_lr
        return start + (base_lr - start) * (step / warmup)
    t = (step - warmup) / (total_steps - 1 - warmup)
    return final + (base_lr - final) * 0.5 * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# data plumbing


def _crop_origin(rng: np.random.Generator, mask: np.ndarray, crop: int, tries: int = 50):
    """Top-left corner of a crop window; the window touches the mask whenever
    the mask is non-empty (rejection sampling with a centered fallback)."""
    h, w = mask.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds image size {(h, w)}")
    if crop == h and crop == w:
        return 0, 0
    has_mask = bool(mask.any())
    for _ in range(tries):
        y = int(rng.integers(0, h - crop + 1))
        x = int(rng.integers(0, w - crop + 1))
        if not has_mask or mask[y : y + crop, x : x + crop].any():
            return y, x
    ys, xs = np.nonzero(mask)
    i = int(rng.integers(0, len(ys)))
    y = int(np.clip(ys[i] - crop // 2, 0, h - crop))
    x = int(np.clip(xs[i] - crop // 2, 0, w - crop))
    return y, x


def _prepare_arrays(triplets) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    out = []
    for t in triplets:
        out.append(
            (
                t.image.astype(np.float32) / 255.0,
                (t.mask > 0).astype(np.float32),
                t.gt.astype(np.float32) / 255.0,
            )
        )
    return out


def _make_batch(arrays, indices, crop, rng):
    imgs, masks, gts = [], [], []
    for i in indices:
        image, mask, gt = arrays[i]
        y, x = _crop_origin(rng, mask, crop)
        imgs.append(image[y : y + crop, x : x + crop])
        masks.append(mask[y : y + crop, x : x + crop])
        gts.append(gt[y : y + crop, x : x + crop])
    images = torch.from_numpy(np.ascontiguousarray(np.stack(imgs).transpose(0, 3, 1, 2)))
    gts_t = torch.from_numpy(np.ascontiguousarray(np.stack(gts).transpose(0, 3, 1, 2)))
    masks_t = torch.from_numpy(np.stack(masks))[:, None]
    return images, masks_t, gts_t


def _loss_terms(preds, gt, lam, supervise):
    if supervise == "final_only":
        terms = [(preds[-1] - gt).abs().mean()]
        weights = [1.0]
    else:
        k_total = len(preds)
        terms = [(p - gt).abs().mean() for p in preds]
        weights = [lam ** (k_total - 1 - i) for i in range(k_total)]
    total = sum(w * t for w, t in zip(weights, terms))
    return total, terms


# ---------------------------------------------------------------------------
# training


def build_model(model_config: ModelConfig, train_config: TrainConfig, seed=None) -> EraserNet:
    """Initialize a network wired to the training config's ablation flags."""
    cfg = replace(model_config, iterations=train_config.iterations)
    return init_model(
        cfg,
        train_config.seed if seed is None else seed,
        predict=train_config.predict,
        use_context=train_config.use_context,
        use_prev_image=train_config.use_prev_image,
        share_weights=train_config.share_weights,
        use_mask_input=train_config.mask_mode != "none",
    )


def make_optimizer(model: EraserNet, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.base_lr, betas=ADAM_BETAS)


def train(model, triplets, config: TrainConfig, *, optimizer=None, log_path=None):
    """Train for config.epochs passes over shuffled, mask-aware crops.

    Gradients flow through the full iteration recurrence (no truncation).
    Returns one LossReport per optimizer step; with epochs == 0 the weights
    are untouched. Deterministic for a fixed seed in a single-threaded run.
    """
    config.validate()
    triplets = list(triplets)
    if not triplets:
        raise ValueError("training needs a non-empty dataset")
    if optimizer is None:
        optimizer = make_optimizer(model, config)
    arrays = _prepare_arrays(triplets)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(arrays) / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    reports: list[LossReport] = []
    try:
        step = 0
        for _epoch in range(config.epochs):
            order = rng.permutation(len(arrays))
            for b in range(steps_per_epoch):
                indices = order[b * config.batch_size : (b + 1) * config.batch_size]
                if len(indices) == 0:
                    continue
                images, masks, gts = _make_batch(arrays, indices, config.crop, rng)
                lr = lr_schedule(step, total_steps, config.base_lr)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                preds = model(images, masks, iterations=config.iterations)
                total, terms = _loss_terms(preds, gts, config.lam, config.supervise)
                if not torch.isfinite(total):
                    raise TrainingDiverged(step, lr, [float(t.detach()) for t in terms])
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                report = LossReport(
                    total=float(total.detach()),
                    per_iteration=[float((p.detach() - gts).abs().mean()) for p in preds],
                    step=step,
                    lr=lr,
                )
                reports.append(report)
                if log_fh:
                    log_fh.write(json.dumps(report.as_dict()) + "\n")
                step += 1
    finally:
        if log_fh:
            log_fh.close()
    return model, reports


def train_epoch(model, triplets, config: TrainConfig, optimizer=None):
    """One epoch with the schedule spanning just that epoch."""
    return train(model, triplets, replace(config, epochs=1), optimizer=optimizer)


# ---------------------------------------------------------------------------
# ablations


ABLATION_VARIANTS = {
    "full": {},
    "no_erasing_module": {},  # handled structurally below
    "direct_prediction": {"predict": "direct"},
    "no_context": {"use_context": False},
    "no_prev_image": {"use_prev_image": False},
    "no_weight_sharing": {"share_weights": False},
    "final_only": {"supervise": "final_only"},
    "no_mask": {"mask_mode": "none"},
    "all_mask": {"mask_mode": "all"},
}


def derive_mask_variant(triplets, mask_mode: str, alpha: float, seed: int) -> list[Triplet]:
    """Produce the training view of an all-text-removed dataset.

    "all" and "none" keep the stored full mask and all-removed gt. "part"
    re-selects instances per sample and composites a partial ground truth
    (erased inside the new mask, input elsewhere), mirroring how a
    partial-erasure test set is built without re-annotation.
    """
    if mask_mode in ("all", "none"):
        return list(triplets)
    out = []
    for i, t in enumerate(triplets):
        if not t.instances:
            out.append(t)
            continue
        sample_seed = (seed * 1_000_003 + i) & 0x7FFFFFFF
        selected_ids = select_instances(t.instances, alpha, sample_seed)
        selected = [inst for inst in t.instances if inst.id in selected_ids]
        unselected = [inst for inst in t.instances if inst.id not in selected_ids]
        h, w = t.image.shape[:2]
        mask = rasterize_mask(selected, h, w)
        out.append(
            Triplet(
                image=t.image,
                mask=mask,
                gt=compose_partial_gt(t.image, t.gt, mask),
                preserved_mask=rasterize_mask(unselected, h, w),
                seed=sample_seed,
                sample_id=t.sample_id,
                instances=t.instances,
            )
        )
    return out


def run_ablation(
    variant_name: str,
    base_config: TrainConfig,
    dataset,
    model_config: ModelConfig | None = None,
    *,
    protocol: str = "raw",
    log_path=None,
):
    """Train one ablated variant on an all-text-removed dataset and score it.

    Returns (row, model) where row is a machine-readable dict with the metric
    columns plus the parameter count in millions.
    """
    if variant_name not in ABLATION_VARIANTS:
        raise ValueError(
            f"unknown variant {variant_name!r}; valid: {', '.join(sorted(ABLATION_VARIANTS))}"
        )
    config = replace(base_config, **ABLATION_VARIANTS[variant_name]).validate()
    if model_config is None:
        model_config = ModelConfig()
    data = derive_mask_variant(dataset, config.mask_mode, config.alpha, config.seed)

    if variant_name == "no_erasing_module":
        model = init_model(
            replace(model_config, iterations=config.iterations),
            config.seed,
            use_erasing_module=False,
            use_mask_input=config.mask_mode != "none",
        )
    else:
        model = build_model(model_config, config)
    model, _reports = train(model, data, config, log_path=log_path)
    model.eval()
    report = evaluate_dataset(model_predictor(model), data, protocol=protocol)
    row = {
        "variant": variant_name,
        "psnr": report.psnr,
        "mssim": report.mssim,
        "mse": report.mse,
        "age": report.age,
        "peps": report.peps,
        "pceps": report.pceps,
        "params_m": count_parameters(model, "all") / 1e6,
    }
    return row, model
