"""Mood classifiers: 1-CNN, 2-CNN+MLP (feature fusion), 2-CNN (summed losses), TS-Net.

Tensors are (batch, channels, frames, height, width). Logit index ``i`` is mood
class ``CLASS_ORDER[i]``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import ATTENTION_POSITIONS, ATTENTION_TAGS, make_attention, to_batch
from .errors import ConfigError, InferenceError

CLASS_ORDER = (-1, 0, 1)
ARCHITECTURES = ("1cnn", "2cnn_mlp", "2cnn", "tsnet")
CHECKPOINT_FORMAT = 1


def class_to_index(c: int) -> int:
    return CLASS_ORDER.index(int(c))


def index_to_class(i: int) -> int:
    return CLASS_ORDER[int(i)]


# --------------------------------------------------------------------- specs


@dataclass(frozen=True)
class CnnBranchSpec:
    conv_channels: tuple[int, ...] = (16, 32, 32)
    kernel: int = 3
    conv_stride: int = 3
    pool_stride: int = 2
    dense_units: int = 512
    classes: int = 3
    dropout_rate: float = 0.5
    input_shape: tuple[int, int, int, int] = (5, 32, 32, 3)  # frames, H, W, channels

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if len(self.conv_channels) != 3 or min(self.conv_channels) < 1:
            raise ConfigError(f"need three positive conv widths, got {self.conv_channels}")
        if self.kernel < 1 or self.conv_stride < 1 or self.pool_stride < 1:
            raise ConfigError("kernel and strides must be >= 1")
        if self.dense_units < 1 or self.classes != 3:
            raise ConfigError("dense_units must be >= 1 and classes must be 3")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ConfigError(f"bad input_shape {self.input_shape}")

    def stage_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Channels-first shape after every layer, from same-padding arithmetic."""
        d, h, w, c = self.input_shape
        dims = (d, h, w)
        out = [("input", (c, *dims))]
        for i, ch in enumerate(self.conv_channels, 1):
            dims = tuple(math.ceil(n / self.conv_stride) for n in dims)
            out.append((f"conv{i}", (ch, *dims)))
            dims = tuple(math.ceil(n / self.pool_stride) for n in dims)
            out.append((f"pool{i}", (ch, *dims)))
        flat = self.conv_channels[-1] * int(np.prod(dims))
        out += [("flatten", (flat,)), ("batchnorm", (flat,)),
                ("dense", (self.dense_units,)), ("softmax", (self.classes,))]
        return out


@dataclass(frozen=True)
class FusionSpec:
    fused_feature_width: int = 1024
    mlp_hidden: int = 512
    classes: int = 3
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.fused_feature_width % 2 or self.mlp_hidden < 1 or self.classes != 3:
            raise ConfigError("fused width must be even, hidden >= 1, classes == 3")


@dataclass(frozen=True)
class DistillationConfig:
    temperature: float = 5.0
    alpha: float = 0.1
    # conventional T**2 rescaling of the distillation term; off to keep the loss literal
    t_squared: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")


# ---------------------------------------------------------------- primitives


def _same_pads(size: int, k: int, s: int) -> tuple[int, int]:
    out = math.ceil(size / s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def same_pad(x: torch.Tensor, k: int, s: int) -> torch.Tensor:
    pads = []
    # F.pad wants the last dim first
    for size in reversed(x.shape[2:]):
        pads.extend(_same_pads(size, k, s))
    return F.pad(x, pads)


class SameConv3d(nn.Conv3d):
    """Conv3d with TensorFlow-style 'same' padding for any stride."""

    def forward(self, x):
        return super().forward(same_pad(x, self.kernel_size[0], self.stride[0]))


class SamePool3d(nn.Module):
    """Average pool (kernel = stride) with 'same' padding; padded cells are not counted."""

    def __init__(self, stride: int = 2):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        s = self.stride
        padded = same_pad(x, s, s)
        ones = same_pad(torch.ones_like(x[:, :1]), s, s)
        return F.avg_pool3d(padded, s, s) / F.avg_pool3d(ones, s, s)


# -------------------------------------------------------------------- models


class CnnBranch(nn.Module):
    """The 1-CNN: optional attention, three conv/pool stages, BN, dense(512), softmax(3)."""

    arch = "1cnn"

    def __init__(self, spec: CnnBranchSpec = CnnBranchSpec(), attention: str = "none",
                 position: str = "input", literal_product: bool = False):
        super().__init__()
        if attention not in ATTENTION_TAGS:
            raise ConfigError(f"unknown attention tag {attention!r}")
        if position not in ATTENTION_POSITIONS:
            raise ConfigError(f"unknown attention position {position!r}")
        self.spec = spec
        self.attention_tag = attention
        self.position = position
        self.trained = False
        in_ch = spec.input_shape[3]
        att_ch = in_ch if position == "input" else spec.conv_channels[0]
        self.attention = make_attention(attention, att_ch, literal_product)
        chans = (in_ch, *spec.conv_channels)
        for i in range(3):
            setattr(self, f"conv{i + 1}", nn.Sequential(
                SameConv3d(chans[i], chans[i + 1], spec.kernel, stride=spec.conv_stride),
                nn.ReLU(),
            ))
            setattr(self, f"pool{i + 1}", SamePool3d(spec.pool_stride))
        flat = spec.stage_shapes()[-4][1][0]
        self.norm = nn.BatchNorm1d(flat)
        self.dense = nn.Linear(flat, spec.dense_units)
        self.dropout = nn.Dropout(spec.dropout_rate)
        self.head = nn.Linear(spec.dense_units, spec.classes)

    @property
    def penultimate_width(self) -> int:
        return self.spec.dense_units

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if self.position == "input":
            x = self.attention(x)
        x = self.pool1(self.conv1(x))
        if self.position == "conv1":
            x = self.attention(x)
        x = self.pool3(self.conv3(self.pool2(self.conv2(x))))
        return F.relu(self.dense(self.norm(x.flatten(1))))

    def forward(self, x):
        return self.head(self.dropout(self.features(x)))

    def cam_layers(self) -> dict[str, nn.Module]:
        layers = {"conv1": self.conv1, "conv2": self.conv2, "conv3": self.conv3}
        if self.position == "input":
            layers["input"] = self.attention
        return layers


class TwoCNN(nn.Module):
    """Two 1-CNN branches over one clip; mood head is read at inference.

    With input-position attention a single attention module feeds both
    branches, so the delta loss reaches the mood path through the gates.
    """

    arch = "2cnn"

    def __init__(self, spec: CnnBranchSpec = CnnBranchSpec(), attention: str = "none",
                 position: str = "input", literal_product: bool = False):
        super().__init__()
        self.spec = spec
        self.attention_tag = attention
        self.position = position
        self.trained = False
        shared = position == "input"
        self.attention = make_attention(attention if shared else "none",
                                        spec.input_shape[3], literal_product)
        branch_att = "none" if shared else attention
        self.mood_branch = CnnBranch(spec, branch_att, position, literal_product)
        self.delta_branch = CnnBranch(spec, branch_att, position, literal_product)

    def forward_both(self, x):
        x = self.attention(x)
        return self.mood_branch(x), self.delta_branch(x)

    def forward(self, x):
        return self.mood_branch(self.attention(x))

    def cam_layers(self):
        layers = self.mood_branch.cam_layers()
        if self.position == "input":
            layers["input"] = self.attention
        return layers


def _freeze(module: nn.Module) -> None:
    module.requires_grad_(False)
    module.eval()


class TwoCNNMLP(nn.Module):
    """Frozen mood and delta 1-CNNs; an MLP classifies their concatenated features."""

    arch = "2cnn_mlp"

    def __init__(self, mood_branch: CnnBranch, delta_branch: CnnBranch,
                 fusion: FusionSpec = FusionSpec()):
        super().__init__()
        for name, b in (("mood", mood_branch), ("delta", delta_branch)):
            if b.penultimate_width * 2 != fusion.fused_feature_width:
                raise ConfigError(
                    f"{name} branch penultimate width {b.penultimate_width} does not fill "
                    f"half of fused width {fusion.fused_feature_width}"
                )
        self.mood_branch = mood_branch
        self.delta_branch = delta_branch
        self.fusion = fusion
        self.spec = mood_branch.spec
        self.attention_tag = mood_branch.attention_tag
        self.position = mood_branch.position
        self.trained = False
        _freeze(self.mood_branch)
        _freeze(self.delta_branch)
        self.mlp = nn.Sequential(
            nn.Linear(fusion.fused_feature_width, fusion.mlp_hidden),
            nn.ReLU(),
            nn.Dropout(fusion.dropout_rate),
            nn.Linear(fusion.mlp_hidden, fusion.classes),
        )

    def train(self, mode: bool = True):
        super().train(mode)
        self.mood_branch.eval()
        self.delta_branch.eval()
        return self

    def fused_features(self, x):
        return torch.cat([self.mood_branch.features(x), self.delta_branch.features(x)], dim=1)

    def forward(self, x):
        return self.mlp(self.fused_features(x))

    def cam_layers(self):
        return self.mood_branch.cam_layers()


class TSNet(nn.Module):
    """Frozen 2-CNN+MLP teacher distilling into a 1-CNN student; inference runs the student."""

    arch = "tsnet"

    def __init__(self, teacher: TwoCNNMLP, student: CnnBranch,
                 cfg: DistillationConfig = DistillationConfig()):
        super().__init__()
        self.teacher = teacher
        self.student = student
        self.cfg = cfg
        self.spec = student.spec
        self.attention_tag = student.attention_tag
        self.position = student.position
        self.trained = False
        _freeze(self.teacher)

    def train(self, mode: bool = True):
        super().train(mode)
        self.teacher.eval()
        return self

    def teacher_logits(self, x):
        with torch.no_grad():
            return self.teacher(x)

    def forward(self, x):
        return self.student(x)

    def cam_layers(self):
        return self.student.cam_layers()


def build_1cnn(spec: CnnBranchSpec = CnnBranchSpec(), attention: str = "none",
               position: str = "input", literal_product: bool = False,
               seed: int | None = None) -> CnnBranch:
    if seed is not None:
        torch.manual_seed(seed)
    return CnnBranch(spec, attention, position, literal_product)


def build_2cnn(spec: CnnBranchSpec = CnnBranchSpec(), attention: str = "none",
               position: str = "input", literal_product: bool = False,
               seed: int | None = None) -> TwoCNN:
    if seed is not None:
        torch.manual_seed(seed)
    return TwoCNN(spec, attention, position, literal_product)


def build_2cnn_mlp(mood_branch: CnnBranch, delta_branch: CnnBranch,
                   fusion: FusionSpec = FusionSpec(), seed: int | None = None) -> TwoCNNMLP:
    for name, b in (("mood", mood_branch), ("delta", delta_branch)):
        if not getattr(b, "trained", False):
            raise ConfigError(f"{name} branch must be trained before fusion")
    if seed is not None:
        torch.manual_seed(seed)
    return TwoCNNMLP(mood_branch, delta_branch, fusion)


def build_tsnet(teacher: TwoCNNMLP, student_spec: CnnBranchSpec = CnnBranchSpec(),
                cfg: DistillationConfig = DistillationConfig(), attention: str = "none",
                position: str = "input", literal_product: bool = False,
                seed: int | None = None) -> TSNet:
    if not isinstance(teacher, TwoCNNMLP):
        raise ConfigError("TS-Net teacher must be a 2-CNN+MLP")
    if not getattr(teacher, "trained", False):
        raise ConfigError("TS-Net teacher must be trained before distillation")
    if seed is not None:
        torch.manual_seed(seed)
    return TSNet(teacher, CnnBranch(student_spec, attention, position, literal_product), cfg)


# -------------------------------------------------------------------- losses


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean categorical cross-entropy; ``targets`` are class indices."""
    return F.cross_entropy(logits, targets)


def two_branch_loss(mood_logits, delta_logits, mood_targets, delta_targets):
    return cross_entropy(mood_logits, mood_targets) + cross_entropy(delta_logits, delta_targets)


def softened(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    return torch.softmax(logits / temperature, dim=-1)


def distillation_loss(student_logits, teacher_logits, temperature: float,
                      t_squared: bool = False) -> torch.Tensor:
    """Batch-mean KL(teacher || student) between the temperature-softened distributions."""
    log_p_t = torch.log_softmax(teacher_logits / temperature, dim=-1)
    log_p_s = torch.log_softmax(student_logits / temperature, dim=-1)
    kl = (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=-1).mean()
    return kl * temperature ** 2 if t_squared else kl


def tsnet_loss(student_logits, teacher_logits, targets, cfg: DistillationConfig):
    """alpha * CE(student, hard labels) + (1 - alpha) * KL distillation term."""
    l_stu = cross_entropy(student_logits, targets)
    l_dis = distillation_loss(student_logits, teacher_logits, cfg.temperature, cfg.t_squared)
    return cfg.alpha * l_stu + (1.0 - cfg.alpha) * l_dis


# ----------------------------------------------------------------- inference


def predict_batch(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Probabilities (N, 3) at temperature 1."""
    expected = (model.spec.input_shape[3], *model.spec.input_shape[:3])
    if x.ndim != 5 or tuple(x.shape[1:]) != expected:
        raise InferenceError(f"input shape {tuple(x.shape)} does not match (N, {expected})")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            dtype = next(model.parameters()).dtype
            return torch.softmax(model(x.to(dtype)), dim=-1)
    finally:
        model.train(was_training)


def predict(model, clip) -> np.ndarray:
    """3-vector of class probabilities, ordered as ``CLASS_ORDER``."""
    module = getattr(model, "module", model)
    pixels = np.asarray(getattr(clip, "pixels", clip), dtype=np.float32)
    if pixels.shape != tuple(module.spec.input_shape):
        raise InferenceError(f"clip shape {pixels.shape} != {module.spec.input_shape}")
    return predict_batch(module, to_batch(pixels))[0].double().numpy()


# --------------------------------------------------------------- checkpoints


@dataclass
class TrainedModel:
    arch: str
    attention: str
    module: nn.Module
    metadata: dict[str, Any] = field(default_factory=dict)

    def predict(self, clip) -> np.ndarray:
        return predict(self.module, clip)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _structure(module: nn.Module) -> dict[str, Any]:
    out = {
        "architecture": module.arch,
        "attention": module.attention_tag,
        "attention_position": module.position,
        "literal_product": bool(getattr(_attention_of(module), "literal_product", False)),
        "branch_spec": asdict(module.spec),
    }
    if isinstance(module, TwoCNNMLP):
        out["fusion"] = asdict(module.fusion)
    if isinstance(module, TSNet):
        out["fusion"] = asdict(module.teacher.fusion)
        out["distillation"] = asdict(module.cfg)
        out["teacher_attention"] = module.teacher.attention_tag
    return out


def _attention_of(module):
    if isinstance(module, (TwoCNNMLP,)):
        return _attention_of(module.mood_branch)
    if isinstance(module, TSNet):
        return _attention_of(module.student)
    if isinstance(module, TwoCNN) and module.position != "input":
        return module.mood_branch.attention
    return module.attention


def _rebuild(structure: dict[str, Any]) -> nn.Module:
    spec = CnnBranchSpec(**structure["branch_spec"])
    arch = structure["architecture"]
    kw = dict(attention=structure["attention"], position=structure["attention_position"],
              literal_product=structure["literal_product"])
    if arch == "1cnn":
        return CnnBranch(spec, **kw)
    if arch == "2cnn":
        return TwoCNN(spec, **kw)
    fusion = FusionSpec(**structure["fusion"])
    if arch == "2cnn_mlp":
        return TwoCNNMLP(CnnBranch(spec, **kw), CnnBranch(spec, **kw), fusion)
    if arch == "tsnet":
        t_kw = dict(kw, attention=structure.get("teacher_attention", kw["attention"]))
        teacher = TwoCNNMLP(CnnBranch(spec, **t_kw), CnnBranch(spec, **t_kw), fusion)
        return TSNet(teacher, CnnBranch(spec, **kw), DistillationConfig(**structure["distillation"]))
    raise ConfigError(f"unknown architecture {arch!r}")


def save_checkpoint(model: TrainedModel, directory: str | Path) -> Path:
    """Write ``params.pt`` plus a ``model.json`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.module.state_dict(), directory / "params.pt")
    sidecar = {
        "format": CHECKPOINT_FORMAT,
        **_structure(model.module),
        "class_order": list(CLASS_ORDER),
        "seed": model.metadata.get("seed"),
        "fold": model.metadata.get("fold"),
        "hyperparameters": model.metadata.get("hyperparameters", {}),
        "data_fingerprint": model.metadata.get("data_fingerprint"),
        "parameter_checksum": parameter_checksum(model.module),
    }
    (directory / "model.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> TrainedModel:
    directory = Path(directory)
    sidecar_path = directory / "model.json"
    if not sidecar_path.exists():
        raise FileNotFoundError(f"no checkpoint sidecar at {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    if tuple(sidecar["class_order"]) != CLASS_ORDER:
        raise ConfigError(f"checkpoint class order {sidecar['class_order']} unsupported")
    module = _rebuild(sidecar)
    state = torch.load(directory / "params.pt", map_location="cpu", weights_only=True)
    module.load_state_dict(state)
    module.eval()
    for m in module.modules():
        if hasattr(m, "trained"):
            m.trained = True
    meta = {k: sidecar.get(k) for k in ("seed", "fold", "hyperparameters", "data_fingerprint")}
    return TrainedModel(sidecar["architecture"], sidecar["attention"], module, meta)
