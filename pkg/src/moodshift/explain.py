"""Grad-CAM heat maps over conv stages (or the attended input) and frame overlays."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attention import to_batch
from .errors import ConfigError, InferenceError
from .models import class_to_index

# the last stage is 1x1x1 at 32x32 input, so its map is constant; conv1 keeps a 2x11x11 grid
DEFAULT_LAYER = "conv1"


@dataclass
class CamMap:
    heat: np.ndarray  # (frames, H, W) in [0, 1]
    target_class: int
    layer: str
    zero_map: bool
    low_res: np.ndarray  # rectified map at the layer's own resolution, before upsampling

    def to_json(self) -> dict:
        return {
            "target_class": self.target_class,
            "layer": self.layer,
            "zero_map": self.zero_map,
            "shape": list(self.heat.shape),
            "heat": np.round(self.heat.astype(float), 6).tolist(),
            "low_res": self.low_res.astype(float).tolist(),
        }


def normalize_map(cam: torch.Tensor) -> tuple[torch.Tensor, bool]:
    peak = cam.max()
    if not peak > 0:
        return torch.zeros_like(cam), True
    return cam / peak, False


def activations_and_gradients(module, x: torch.Tensor, target: int, layer: str):
    layers = module.cam_layers()
    if layer not in layers:
        raise ConfigError(f"layer {layer!r} not available; choose from {sorted(layers)}")
    captured = {}

    def hook(_mod, _inp, out):
        captured["act"] = out

    handle = layers[layer].register_forward_hook(hook)
    was_training = module.training
    module.eval()
    try:
        x = x.detach().clone().requires_grad_(True)
        logits = module(x)
        score = logits[0, class_to_index(target)]
        act = captured["act"]
        (grad,) = torch.autograd.grad(score, act, allow_unused=True)
    finally:
        handle.remove()
        module.train(was_training)
    if grad is None:
        grad = torch.zeros_like(act)
    return act.detach(), grad.detach()


def grad_cam(model, clip, target: int, layer: str = DEFAULT_LAYER) -> CamMap:
    """Gradient-weighted class activation map for mood class ``target``.

    Channel weights are the mean gradient of the target logit over each
    channel's (frames, H, W) grid; the map is the ReLU of the weighted channel
    sum, trilinearly upsampled to the clip grid and scaled to a peak of 1.
    """
    module = getattr(model, "module", model)
    pixels = np.asarray(getattr(clip, "pixels", clip), dtype=np.float32)
    if pixels.shape != tuple(module.spec.input_shape):
        raise InferenceError(f"clip shape {pixels.shape} != {module.spec.input_shape}")
    dtype = next(module.parameters()).dtype
    x = to_batch(pixels).to(dtype)
    act, grad = activations_and_gradients(module, x, target, layer)
    weights = grad.mean(dim=(2, 3, 4), keepdim=True)
    low = F.relu((weights * act).sum(dim=1))  # (1, D', H', W')
    up = F.interpolate(low[:, None], size=tuple(module.spec.input_shape[:3]),
                       mode="trilinear", align_corners=False)[0, 0].clamp_min(0)
    heat, zero = normalize_map(up)
    return CamMap(heat.numpy(), int(target), layer, zero, low[0].numpy())


def overlay(frame: np.ndarray, heat: np.ndarray, cmap: str = "jet") -> np.ndarray:
    """Blend each pixel toward the colormap colour of its heat value, in proportion to heat."""
    from matplotlib import colormaps

    colors = colormaps[cmap](heat)[..., :3]
    h = heat[..., None]
    return (1.0 - h) * frame + h * colors


def render_cam(cam: CamMap, clip, out_dir: str | Path, scale: int = 1,
               cmap: str = "jet") -> list[Path]:
    """Write ``frame_XX.png`` overlays plus ``cam.json`` holding the raw map."""
    from PIL import Image

    pixels = np.asarray(getattr(clip, "pixels", clip), dtype=np.float64)
    if pixels.shape[:3] != cam.heat.shape:
        raise InferenceError(f"map shape {cam.heat.shape} does not match clip {pixels.shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(pixels.shape[0]):
        img = overlay(pixels[i], cam.heat[i].astype(np.float64), cmap)
        arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        im = Image.fromarray(arr, mode="RGB")
        if scale > 1:
            im = im.resize((arr.shape[1] * scale, arr.shape[0] * scale), Image.NEAREST)
        path = out_dir / f"frame_{i:02d}.png"
        im.save(path)
        written.append(path)
    (out_dir / "cam.json").write_text(json.dumps(cam.to_json()) + "\n")
    return written
