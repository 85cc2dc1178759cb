"""The iterative erasing network.

A full-resolution convolutional backbone turns the image/mask pair into a
context feature map and an initial latent state. A single erasing module,
reused at every iteration, then refines the prediction: it encodes the
previous output, folds it into the latent state through a convolutional
gated recurrent cell, and emits a residual image that is added to the
ORIGINAL input (never the previous prediction) and clamped to [0, 1].

No layer changes spatial resolution; every intermediate map matches the
input height and width.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1

# channel plan of the erasing feature extractor: prev image (3) -> 16 -> 29,
# then concat with the prev image and the context feature before a 1x1 fuse
_EXTRACT_CH1 = 16
_EXTRACT_CH2 = 29


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    latent_channels is the width D of the context/latent feature maps;
    iterations is the number K of refinement passes used by default.
    """

    latent_channels: int = 64
    backbone_width: int = 96
    num_residual_blocks: int = 6
    iterations: int = 8
    kernel_size: int = 3
    leaky_slope: float = 0.2

    def validate(self) -> "ModelConfig":
        if self.latent_channels < 1:
            raise ValueError(f"latent_channels must be >= 1, got {self.latent_channels}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.kernel_size % 2 != 1 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.backbone_width < 1 or self.num_residual_blocks < 0:
            raise ValueError("backbone_width must be >= 1 and num_residual_blocks >= 0")
        return self


class ResidualBlock(nn.Module):
    def __init__(self, channels, kernel_size):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size, padding=pad)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class Backbone(nn.Module):
    """Entry convolution plus residual blocks; stride 1 everywhere."""

    def __init__(self, in_channels, width, num_blocks, kernel_size):
        super().__init__()
        pad = kernel_size // 2
        self.entry = nn.Conv2d(in_channels, width, kernel_size, padding=pad)
        self.blocks = nn.ModuleList(ResidualBlock(width, kernel_size) for _ in range(num_blocks))

    def forward(self, x):
        x = F.relu(self.entry(x))
        for block in self.blocks:
            x = block(x)
        return x


class ErasingFeatureExtractor(nn.Module):
    """Encodes the previous prediction and fuses it with the context feature.

    The previous image passes through two convolutions, is concatenated with
    itself and the context feature, and a 1x1 convolution projects the stack
    to the latent width.
    """

    def __init__(self, config: ModelConfig, use_context=True, use_prev_image=True):
        super().__init__()
        if not (use_context or use_prev_image):
            raise ValueError("the erasing module needs at least one of context/previous image")
        self.use_context = use_context
        self.use_prev_image = use_prev_image
        pad = config.kernel_size // 2
        in_ch = 0
        if use_prev_image:
            self.conv1 = nn.Conv2d(3, _EXTRACT_CH1, config.kernel_size, padding=pad)
            self.conv2 = nn.Conv2d(_EXTRACT_CH1, _EXTRACT_CH2, config.kernel_size, padding=pad)
            in_ch += _EXTRACT_CH2 + 3
        if use_context:
            in_ch += config.latent_channels
        self.project = nn.Conv2d(in_ch, config.latent_channels, 1)

    def forward(self, context, prev_image):
        parts = []
        if self.use_prev_image:
            enc = F.relu(self.conv2(F.relu(self.conv1(prev_image))))
            parts.extend((enc, prev_image))
        if self.use_context:
            parts.append(context)
        return self.project(torch.cat(parts, dim=1))


class ConvGRUCell(nn.Module):
    """Convolutional gated recurrent update.

    update = sigmoid(conv([latent, feat]))
    reset  = sigmoid(conv([latent, feat]))
    cand   = tanh(conv([reset * latent, feat]))
    out    = (1 - update) * latent + update * cand

    The output is a convex combination of the previous latent and a tanh
    value, so entries stay in (-1, 1) whenever the previous latent's do.
    """

    def __init__(self, channels, kernel_size):
        super().__init__()
        pad = kernel_size // 2
        in_ch = 2 * channels
        self.update_gate = nn.Conv2d(in_ch, channels, kernel_size, padding=pad)
        self.reset_gate = nn.Conv2d(in_ch, channels, kernel_size, padding=pad)
        self.candidate = nn.Conv2d(in_ch, channels, kernel_size, padding=pad)

    def forward(self, latent, feat):
        stacked = torch.cat([latent, feat], dim=1)
        update = torch.sigmoid(self.update_gate(stacked))
        reset = torch.sigmoid(self.reset_gate(stacked))
        cand = torch.tanh(self.candidate(torch.cat([reset * latent, feat], dim=1)))
        return (1.0 - update) * latent + update * cand


class ResidualHead(nn.Module):
    """Two convolutions with a LeakyReLU in between; unbounded 3-channel output."""

    def __init__(self, in_channels, hidden, kernel_size, slope):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv2d(in_channels, hidden, kernel_size, padding=pad)
        self.conv2 = nn.Conv2d(hidden, 3, kernel_size, padding=pad)
        self.slope = slope

    def forward(self, latent):
        return self.conv2(F.leaky_relu(self.conv1(latent), self.slope))


class ErasingModule(nn.Module):
    """One refinement pass: encode progress, update the latent, predict."""

    def __init__(self, config: ModelConfig, use_context=True, use_prev_image=True):
        super().__init__()
        self.extractor = ErasingFeatureExtractor(config, use_context, use_prev_image)
        self.gru = ConvGRUCell(config.latent_channels, config.kernel_size)
        self.head = ResidualHead(
            config.latent_channels, config.backbone_width, config.kernel_size, config.leaky_slope
        )

    def forward(self, context, prev_image, latent):
        feat = self.extractor(context, prev_image)
        latent = self.gru(latent, feat)
        return latent, self.head(latent)


def apply_residual(image, residual):
    """Prediction update: clamp(I_0 + r, 0, 1). The anchor is always the
    original input, not the previous prediction."""
    if torch.is_tensor(image):
        return torch.clamp(image + residual, 0.0, 1.0)
    return np.clip(np.asarray(image, dtype=np.float64) + np.asarray(residual, dtype=np.float64), 0.0, 1.0)


class EraserNet(nn.Module):
    """Backbone + K applications of a (by default shared) erasing module.

    The keyword flags exist for ablations: direct prediction instead of a
    residual, dropping the context feature or the previous image from the
    erasing module's input, per-iteration (unshared) module weights,
    mask-free input, or no erasing module at all (a plain prediction head
    behind the backbone).
    """

    def __init__(
        self,
        config: ModelConfig,
        *,
        predict: str = "residual",
        use_context: bool = True,
        use_prev_image: bool = True,
        share_weights: bool = True,
        use_mask_input: bool = True,
        use_erasing_module: bool = True,
    ):
        super().__init__()
        if predict not in ("residual", "direct"):
            raise ValueError(f"predict must be 'residual' or 'direct', got {predict!r}")
        self.config = config.validate()
        self.predict = predict
        self.use_mask_input = use_mask_input
        self.share_weights = share_weights
        in_channels = 4 if use_mask_input else 3
        k = config.kernel_size
        pad = k // 2
        self.backbone = Backbone(in_channels, config.backbone_width, config.num_residual_blocks, k)
        self.context_head = nn.Conv2d(config.backbone_width, config.latent_channels, k, padding=pad)
        self.latent_head = nn.Conv2d(config.backbone_width, config.latent_channels, k, padding=pad)
        if use_erasing_module:
            if share_weights:
                self.erasing = ErasingModule(config, use_context, use_prev_image)
            else:
                self.erasing = nn.ModuleList(
                    ErasingModule(config, use_context, use_prev_image)
                    for _ in range(config.iterations)
                )
            self.baseline_head = None
        else:
            self.erasing = None
            self.baseline_head = ResidualHead(
                config.latent_channels, config.backbone_width, k, config.leaky_slope
            )

    def variant(self) -> dict:
        erasing = self.erasing
        return {
            "predict": self.predict,
            "use_context": erasing is None or _first_module(erasing).extractor.use_context,
            "use_prev_image": erasing is None or _first_module(erasing).extractor.use_prev_image,
            "share_weights": self.share_weights,
            "use_mask_input": self.use_mask_input,
            "use_erasing_module": erasing is not None,
        }

    def extract_features(self, image, mask=None):
        """Context feature and initial latent, both (B, D, H, W). The latent
        passes through tanh so its entries start inside (-1, 1)."""
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"image must be (B, 3, H, W), got {tuple(image.shape)}")
        if self.use_mask_input:
            if mask is None:
                raise ValueError("this model takes an erase mask input")
            if mask.dim() != 4 or mask.shape[1] != 1 or mask.shape[2:] != image.shape[2:]:
                raise ValueError(
                    f"mask must be (B, 1, H, W) matching the image, got {tuple(mask.shape)}"
                )
            x = torch.cat([image, mask], dim=1)
        else:
            x = image
        feats = self.backbone(x)
        return self.context_head(feats), torch.tanh(self.latent_head(feats))

    def forward(self, image, mask=None, iterations=None, return_latents=False):
        """Run the erasure loop; returns the list [I_1 ... I_K].

        With return_latents, also returns [l_1 ... l_K]. Passing `iterations`
        overrides the trained iteration count; the same module weights are
        reused for every pass.
        """
        if iterations is None:
            iterations = self.config.iterations
        if iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {iterations}")
        context, latent = self.extract_features(image, mask)

        if self.erasing is None:
            out = self.baseline_head(latent)
            pred = self._to_prediction(image, out)
            return ([pred], [latent]) if return_latents else [pred]

        preds = []
        latents = []
        prev = image
        for k in range(iterations):
            if self.share_weights:
                module = self.erasing
            else:
                module = self.erasing[min(k, len(self.erasing) - 1)]
            latent, out = module(context, prev, latent)
            pred = self._to_prediction(image, out)
            preds.append(pred)
            latents.append(latent)
            prev = pred
        return (preds, latents) if return_latents else preds

    def _to_prediction(self, image, head_out):
        if self.predict == "residual":
            return apply_residual(image, head_out)
        return torch.clamp(head_out, 0.0, 1.0)


def _first_module(erasing):
    return erasing[0] if isinstance(erasing, nn.ModuleList) else erasing


def init_model(config: ModelConfig, seed: int, **variant_flags) -> EraserNet:
    """Build a network and initialize it deterministically from `seed`.

    Kernels get uniform values scaled by fan-in; biases are zero. The same
    (config, seed, flags) always produces identical parameter bytes.
    """
    model = EraserNet(config, **variant_flags)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() > 1:
                fan_in = p.shape[1:].numel()
                bound = math.sqrt(1.0 / fan_in)
                p.uniform_(-bound, bound, generator=gen)
            else:
                p.zero_()
    return model


def count_parameters(model: EraserNet, scope: str = "all") -> int:
    """Exact trainable-scalar count for a scope.

    "backbone" covers the entry convolution and residual blocks;
    "erasing_module" covers the per-iteration machinery (or the baseline
    prediction head when the erasing module is ablated away); "all" is the
    whole network including the two parallel feature heads.
    """
    if scope == "all":
        module = model
    elif scope == "backbone":
        module = model.backbone
    elif scope == "erasing_module":
        module = model.erasing if model.erasing is not None else model.baseline_head
    else:
        raise ValueError(f"unknown scope {scope!r}; use all | backbone | erasing_module")
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# tensor/image conversion and inference helpers


def image_to_tensor(image) -> torch.Tensor:
    """uint8 or [0,1] float (H, W, 3) -> float32 (1, 3, H, W) in [0, 1]."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def mask_to_tensor(mask) -> torch.Tensor:
    """{0,1} (H, W) -> float32 (1, 1, H, W)."""
    arr = np.asarray(mask)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) mask, got {arr.shape}")
    return torch.from_numpy((arr > 0).astype(np.float32))[None, None]


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) in [0, 1] -> uint8 (H, W, 3), round-to-nearest."""
    if t.dim() == 4:
        t = t[0]
    arr = t.detach().cpu().numpy().transpose(1, 2, 0)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def predict_image(model: EraserNet, image, mask, iterations=None) -> np.ndarray:
    """Raw (uncomposited) final prediction as uint8 (H, W, 3)."""
    with torch.inference_mode():
        preds = model(image_to_tensor(image), mask_to_tensor(mask), iterations=iterations)
    return tensor_to_image(preds[-1])


def predict_frames(model: EraserNet, image, mask, iterations=None, return_latents=False):
    """Per-iteration predictions (and optionally latents) as numpy arrays."""
    with torch.inference_mode():
        out = model(
            image_to_tensor(image),
            mask_to_tensor(mask),
            iterations=iterations,
            return_latents=return_latents,
        )
    if return_latents:
        preds, latents = out
        return [tensor_to_image(p) for p in preds], [l[0].detach().cpu().numpy() for l in latents]
    return [tensor_to_image(p) for p in out]


def model_predictor(model: EraserNet, iterations=None):
    """Callable(triplet) -> uint8 prediction, for metrics.evaluate_dataset."""

    def predict(triplet):
        return predict_image(model, triplet.image, triplet.mask, iterations)

    return predict


# ---------------------------------------------------------------------------
# checkpoint format: npz container of named little-endian float32 arrays plus
# a JSON metadata entry (config, variant flags, format version)


def save_checkpoint(path, model: EraserNet, optimizer=None, extra: dict | None = None) -> None:
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "variant": model.variant(),
        "extra": extra or {},
    }
    arrays = {
        "format_version": np.array(CHECKPOINT_FORMAT_VERSION, dtype=np.int64),
        "meta_json": np.array(json.dumps(meta)),
    }
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy().astype("<f4")
    if optimizer is not None:
        state = optimizer.state_dict()
        opt_meta = {"param_groups": state["param_groups"], "steps": {}}
        for idx, st in state["state"].items():
            opt_meta["steps"][str(idx)] = float(st["step"])
            arrays[f"opt/{idx}/exp_avg"] = st["exp_avg"].detach().cpu().numpy().astype("<f4")
            arrays[f"opt/{idx}/exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy().astype("<f4")
        arrays["opt_json"] = np.array(json.dumps(opt_meta))
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[EraserNet, dict]:
    """Rebuild the model from a checkpoint; returns (model, metadata)."""
    with np.load(path, allow_pickle=False) as npz:
        version = int(npz["format_version"])
        if version > CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"checkpoint format {version} is newer than supported")
        meta = json.loads(str(npz["meta_json"]))
        params = {
            name[len("param/") :]: torch.from_numpy(np.array(npz[name]))
            for name in npz.files
            if name.startswith("param/")
        }
    config = ModelConfig(**meta["config"])
    model = EraserNet(config, **meta["variant"])
    model.load_state_dict(params, strict=True)
    model.eval()
    return model, meta


def load_optimizer_state(path, optimizer) -> None:
    """Restore Adam moments saved next to the parameters, for resuming."""
    with np.load(path, allow_pickle=False) as npz:
        if "opt_json" not in npz.files:
            raise ValueError(f"{path} holds no optimizer state")
        opt_meta = json.loads(str(npz["opt_json"]))
        state = {
            int(idx): {
                "step": torch.tensor(step),
                "exp_avg": torch.from_numpy(np.array(npz[f"opt/{idx}/exp_avg"])),
                "exp_avg_sq": torch.from_numpy(np.array(npz[f"opt/{idx}/exp_avg_sq"])),
            }
            for idx, step in opt_meta["steps"].items()
        }
    optimizer.load_state_dict({"state": state, "param_groups": opt_meta["param_groups"]})
